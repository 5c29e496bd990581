"""Cross-database meta-training, fine-tuning and transfer evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .featurize import (
    EncoderTrainConfig, FeatureConfig, SingleTableEncoder, StateError, TrainRecord, build_records,
    train_single_table_encoder,
)
from .losses import joeu, reported_q_error
from .model import ModelConfig, MTModel
from .oracle import CostParams, order_cost
from .schema_gen import ConfigError, Database
from .training import (
    TrainConfig, bootstrap_ci, is_legal_slots, label_stats, predict_estimates, predict_order,
    random_baseline_joeu, train_joint,
)
from .workload import WorkloadItem, improvement_ratio, q_error_stats

__all__ = [
    "DBBundle", "TrainRecord", "fine_tune", "mla_train", "train_encoders", "transfer_eval",
]


@dataclass
class DBBundle:
    db: Database
    items: list[WorkloadItem]
    encoders: dict[str, SingleTableEncoder]


def train_encoders(db: Database, single_items: Sequence[WorkloadItem], fcfg: FeatureConfig,
                   ecfg: EncoderTrainConfig) -> dict[str, SingleTableEncoder]:
    """One filter encoder per table from labeled single-table items."""
    by_table: dict[str, list[WorkloadItem]] = {t: [] for t in db.schema.names}
    for it in single_items:
        if it.query.m != 1:
            raise ConfigError("encoder training items must be single-table queries")
        by_table[it.query.tables[0]].append(it)
    out = {}
    for t, items in by_table.items():
        out[t], _ = train_single_table_encoder(
            db, t, [it.query for it in items], fcfg, ecfg, cards=[it.card[0] for it in items])
    return out


def pooled_records(bundles: Sequence[DBBundle], fcfg: FeatureConfig, bushy: bool = False) -> list[TrainRecord]:
    records: list[TrainRecord] = []
    for b in bundles:
        records.extend(build_records(b.db, b.items, b.encoders, fcfg, bushy))
    dims = {r.x.shape[1] for r in records}
    if len(dims) > 1:
        raise ConfigError(f"feature dimensions differ across databases: {sorted(dims)}")
    return records


def mla_train(bundles: Sequence[DBBundle], fcfg: FeatureConfig, tcfg: TrainConfig,
              model_overrides: dict | None = None):
    """Pool every database's records and train the shared and task modules.

    Filter encoders are only read. Returns ``(model, history)``.
    """
    if len(bundles) < 2:
        raise ConfigError("meta-training needs at least two databases")
    overrides = dict(model_overrides or {})
    records = pooled_records(bundles, fcfg, bool(overrides.get("bushy", False)))
    mcfg = ModelConfig(d_in=fcfg.d_in, n_max=fcfg.n_max, m_max=fcfg.m_max,
                       **{**label_stats(records), **overrides})
    model = MTModel(mcfg)
    history = train_joint(model, records, tcfg)
    return model, history


def copy_model(model: MTModel) -> MTModel:
    out = MTModel(model.cfg)
    out.load_state_dict(model.state_dict())
    return out


def fine_tune(model: MTModel, bundle: DBBundle, fcfg: FeatureConfig, tcfg: TrainConfig):
    """Train a copy of ``model`` on the new database's records only."""
    if not bundle.encoders:
        raise StateError("the new database has no trained encoders")
    tuned = copy_model(model)
    if tcfg.epochs == 0 or not bundle.items:
        return tuned, []
    records = build_records(bundle.db, bundle.items, bundle.encoders, fcfg, model.cfg.bushy)
    return tuned, train_joint(tuned, records, tcfg)


def _finite(x: float) -> float:
    return float(x) if math.isfinite(x) else float("nan")


def transfer_eval(model: MTModel, bundle: DBBundle, fcfg: FeatureConfig, k: int = 4,
                  cap: Optional[int] = 64, params: CostParams | None = None,
                  baseline_samples: int = 1000, seed: int = 0,
                  oracle: bool = False) -> dict:
    """Q-error stats, JOEU, legality and oracle-cost totals on a test workload.

    With ``oracle=True`` the model is bypassed: true labels stand in for the
    estimates and the optimal orders for the decoded ones.
    """
    params = params or CostParams()
    db = bundle.db
    records = build_records(db, bundle.items, bundle.encoders, fcfg)
    names = db.schema.names
    card_q, cost_q, joeus, legal = [], [], [], []
    model_total = opt_total = greedy_total = 0.0
    for rec, it in zip(records, bundle.items):
        card, cost = (rec.card, rec.cost) if oracle else predict_estimates(model, rec)
        card_q.append(reported_q_error(math.exp(card[0]), max(it.card[0], 1.0)))
        cost_q.append(reported_q_error(math.exp(cost[0]), max(it.cost[0], 1.0)))
        slots = rec.order if oracle else predict_order(model, rec, k, cap)
        ok = is_legal_slots(slots, rec)
        legal.append(ok)
        joeus.append(joeu(slots, rec.order))
        order = tuple(names[s] for s in slots)
        model_total += order_cost(it, order, db, params) if ok else math.inf
        opt_total += it.optimal_cost
        greedy_total += it.greedy_cost
    base = random_baseline_joeu(records, baseline_samples, seed)
    return {
        "n_queries": len(records),
        "card_q_error": q_error_stats(card_q),
        "cost_q_error": q_error_stats(cost_q),
        "joeu_mean": float(np.mean(joeus)),
        "joeu_ci95": list(bootstrap_ci(joeus, seed=seed)),
        "random_joeu_mean": float(base.mean()),
        "random_joeu_ci95": list(bootstrap_ci(base, seed=seed)),
        "legality_rate": float(np.mean(legal)),
        "total_cost": {"model": _finite(model_total), "optimal": opt_total, "greedy": greedy_total},
        "improvement_vs_greedy": {
            "model": _finite(improvement_ratio(greedy_total, model_total)),
            "optimal": improvement_ratio(greedy_total, opt_total),
        },
    }


def with_epochs(tcfg: TrainConfig, epochs: int) -> TrainConfig:
    return replace(tcfg, epochs=epochs)
