"""Multi-task learned query optimizer: synthetic databases, exact oracles,
a transformer model for cardinality/cost/join-order prediction, and
cross-database meta-training."""

__version__ = "0.1.0"
