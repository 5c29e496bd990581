"""Shared plan encoder, card/cost heads and the join-order decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .nn import (
    MLP, DecoderBlock, Linear, Module, TransformerEncoder, causal_bias, key_padding_bias, param,
)
from .oracle import CapacityError
from .tensor import Tensor

MASK_BIAS = -30.0


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    n_max: int = 16
    m_max: int = 8
    d_m: int = 64
    n_heads: int = 4
    n_blocks: int = 3
    dec_blocks: int = 3
    seed: int = 0
    mask_untouched: bool = True
    bushy: bool = False
    card_mu: float = 0.0
    card_sigma: float = 1.0
    cost_mu: float = 0.0
    cost_sigma: float = 1.0

    @property
    def max_len(self) -> int:
        return 2 * self.m_max - 1

    @property
    def start_token(self) -> int:
        return self.n_max

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class Batch:
    """Padded tensors for a group of training records."""

    x: np.ndarray  # (B, L, d_in)
    valid: np.ndarray  # (B, L)
    card: np.ndarray  # (B, L)
    cost: np.ndarray  # (B, L)
    order: np.ndarray  # (B, m) slot ids, 0-padded
    step_mask: np.ndarray  # (B, m)
    touched: np.ndarray  # (B, n_max) bool
    positions: np.ndarray | None = None  # (B, m, W)


def collate(records, cfg: ModelConfig) -> Batch:
    B = len(records)
    L = max(r.x.shape[0] for r in records)
    m = max(len(r.order) for r in records)
    x = np.zeros((B, L, cfg.d_in))
    valid = np.zeros((B, L), dtype=bool)
    card = np.zeros((B, L))
    cost = np.zeros((B, L))
    order = np.zeros((B, m), dtype=np.int64)
    step_mask = np.zeros((B, m))
    touched = np.zeros((B, cfg.n_max), dtype=bool)
    positions = None
    if cfg.bushy and all(r.positions is not None for r in records):
        positions = np.zeros((B, m, 1 << (cfg.m_max - 1)))
    for b, r in enumerate(records):
        n = r.x.shape[0]
        x[b, :n] = r.x
        valid[b, :n] = True
        card[b, :n] = r.card
        cost[b, :n] = r.cost
        order[b, :len(r.order)] = r.order
        step_mask[b, :len(r.order)] = 1.0
        touched[b, list(r.tables)] = True
        if positions is not None:
            positions[b, :len(r.order)] = r.positions
    return Batch(x, valid, card, cost, order, step_mask, touched, positions)


class MTModel(Module):
    def __init__(self, cfg: ModelConfig):
        if cfg.d_m % cfg.n_heads:
            raise ValueError("d_m must be divisible by n_heads")
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.inp = Linear(rng, cfg.d_in, cfg.d_m)
        self.shared = TransformerEncoder(rng, cfg.d_m, cfg.n_heads, cfg.n_blocks)
        self.card_head = MLP(rng, cfg.d_m, cfg.d_m, 1)
        self.cost_head = MLP(rng, cfg.d_m, cfg.d_m, 1)
        self.tok = param(rng, (cfg.n_max + 1, cfg.d_m), 1.0)
        self.step = param(rng, (cfg.m_max, cfg.d_m), 1.0)
        self.dec = [DecoderBlock(rng, cfg.d_m, cfg.n_heads, 4 * cfg.d_m) for _ in range(cfg.dec_blocks)]
        self.out = Linear(rng, cfg.d_m, cfg.n_max)
        if cfg.bushy:
            self.pos_head = Linear(rng, cfg.d_m, 1 << (cfg.m_max - 1))

    # -- (S) -------------------------------------------------------------
    def forward_shared(self, x, valid: np.ndarray | None = None) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1] > self.cfg.max_len:
            raise CapacityError(f"sequence length {x.shape[1]} exceeds {self.cfg.max_len}")
        return self.shared(self.inp(x), valid)

    # -- (T) -------------------------------------------------------------
    def predict_card(self, S: Tensor) -> Tensor:
        y = T.reshape(self.card_head(S), S.shape[:-1])
        return T.add(T.mul(y, self.cfg.card_sigma), self.cfg.card_mu)

    def predict_cost(self, S: Tensor) -> Tensor:
        y = T.reshape(self.cost_head(S), S.shape[:-1])
        return T.add(T.mul(y, self.cfg.cost_sigma), self.cfg.cost_mu)

    def _decoder_states(self, memory: Tensor, mem_valid: np.ndarray | None, prefixes: np.ndarray) -> Tensor:
        """Hidden states for inputs [START, prefix...]; one row per step."""
        B, t = prefixes.shape
        steps = t + 1
        if steps > self.cfg.m_max:
            raise CapacityError(f"{steps} decode steps exceed m_max={self.cfg.m_max}")
        tokens = np.concatenate([np.full((B, 1), self.cfg.start_token, dtype=np.int64), prefixes], axis=1)
        y = T.add(T.embedding_lookup(self.tok, tokens), T.getitem(self.step, slice(0, steps)))
        self_bias = causal_bias(B, steps)
        cross = None if mem_valid is None else key_padding_bias(mem_valid, steps)
        for block in self.dec:
            y = block(y, memory, self_bias, cross)
        return y

    def _step_bias(self, prefixes: np.ndarray, touched: np.ndarray | None) -> np.ndarray:
        B, t = prefixes.shape
        bias = np.zeros((B, t + 1, self.cfg.n_max))
        if not self.cfg.mask_untouched:
            return bias
        if touched is not None:
            bias += np.where(touched, 0.0, MASK_BIAS)[:, None, :]
        for s in range(1, t + 1):
            rows = np.arange(B)
            for j in range(s):
                bias[rows, s, prefixes[:, j]] = MASK_BIAS
        return bias

    def decode_logprobs(self, memory: Tensor, mem_valid, prefixes: np.ndarray,
                        touched: np.ndarray | None = None) -> Tensor:
        """Teacher-forced log P_t for every step: (B, t+1, n_max)."""
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(memory.shape[0], -1)
        h = self._decoder_states(memory, mem_valid, prefixes)
        logits = T.add(self.out(h), self._step_bias(prefixes, touched))
        return T.log_softmax(logits, axis=-1)

    def position_logprobs(self, memory: Tensor, mem_valid, prefixes: np.ndarray) -> Tensor:
        if not self.cfg.bushy:
            raise RuntimeError("position head requires bushy=True")
        h = self._decoder_states(memory, mem_valid, np.asarray(prefixes, dtype=np.int64))
        return T.log_softmax(self.pos_head(h), axis=-1)

    def decode_step(self, S: Tensor, prefix, touched=None) -> np.ndarray:
        """P_t for a single query given the tables chosen so far."""
        with T.no_grad():
            lp = self.decode_logprobs(S, None, np.asarray([list(prefix)], dtype=np.int64).reshape(1, -1),
                                      None if touched is None else np.asarray(touched)[None])
        return np.exp(lp.data[0, -1])

    def forward(self, batch: Batch):
        """Card/cost predictions per node and teacher-forced order log-probs."""
        S = self.forward_shared(batch.x, batch.valid)
        card = self.predict_card(S)
        cost = self.predict_cost(S)
        prefixes = batch.order[:, :-1]
        logp = self.decode_logprobs(S, batch.valid, prefixes, batch.touched)
        pos = None
        if self.cfg.bushy and batch.positions is not None:
            pos = self.position_logprobs(S, batch.valid, prefixes)
        return S, card, cost, logp, pos

    # -- scoring helpers ---------------------------------------------------
    def encode_one(self, x: np.ndarray) -> Tensor:
        with T.no_grad():
            return self.forward_shared(x[None])

    def scorer(self, S: Tensor, touched_slots):
        """Callable prefixes (n, t) -> (n, n_max) next-step log-probs for one query."""
        touched = np.zeros(self.cfg.n_max, dtype=bool)
        touched[list(touched_slots)] = True

        def score(prefixes: np.ndarray) -> np.ndarray:
            prefixes = np.asarray(prefixes, dtype=np.int64)
            n = prefixes.shape[0]
            mem = Tensor(np.repeat(S.data, n, axis=0))
            with T.no_grad():
                lp = self.decode_logprobs(mem, None, prefixes, np.repeat(touched[None], n, axis=0))
            return lp.data[:, -1, :]

        return score

    def sequence_logprob(self, S: Tensor, orders, touched_slots) -> Tensor:
        """log p(u|x) for each order u (all of equal length) with gradients, shape (n,)."""
        orders = np.asarray(orders, dtype=np.int64)
        n, m = orders.shape
        touched = np.zeros((n, self.cfg.n_max), dtype=bool)
        touched[:, list(touched_slots)] = True
        mem = S if S.shape[0] == n else T.getitem(S, np.zeros(n, dtype=np.int64))
        logp = self.decode_logprobs(mem, None, orders[:, :-1], touched)
        onehot = np.zeros((n, m, self.cfg.n_max))
        onehot[np.arange(n)[:, None], np.arange(m)[None, :], orders] = 1.0
        return T.tsum(T.tsum(T.mul(logp, onehot), axis=-1), axis=-1)

    # -- persistence -----------------------------------------------------
    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "model", "config": asdict(self.cfg)}
        if extra_meta:
            meta.update(extra_meta)
        T.save_checkpoint(path, self.state_dict(), meta)


def load_model(path) -> tuple[MTModel, dict]:
    params, meta = T.load_checkpoint(path)
    if meta.get("kind") != "model":
        raise T.CheckpointError("checkpoint does not hold a model")
    model = MTModel(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(params)
    return model, meta


def sequence_probability(model: MTModel, x: np.ndarray, order, touched_slots=None) -> float:
    """p(u|x) under teacher forcing on u."""
    touched_slots = order if touched_slots is None else touched_slots
    with T.no_grad():
        S = model.encode_one(x)
        return float(np.exp(model.sequence_logprob(S, [list(order)], touched_slots).data[0]))
