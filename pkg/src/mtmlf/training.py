"""Training loops, order evaluation and the random-legal baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .decode import beam_search_constrained, beam_search_unconstrained, frontier_update, adjacency_rows
from .featurize import TrainRecord
from .losses import (
    DEFAULT_LAMBDA, LossWeights, joeu, l_jo_token, l_kl_position, l_qo, l_seq, log_qerror_loss,
)
from .model import Batch, ModelConfig, MTModel, collate


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    kl_weight: float = 1.0
    lam: float = DEFAULT_LAMBDA
    beam_k: int = 4
    beam_cap: Optional[int] = 64


def label_stats(records: Sequence[TrainRecord]) -> dict[str, float]:
    card = np.concatenate([r.card for r in records])
    cost = np.concatenate([r.cost for r in records])
    return {"card_mu": float(card.mean()), "card_sigma": float(max(card.std(), 1e-3)),
            "cost_mu": float(cost.mean()), "cost_sigma": float(max(cost.std(), 1e-3))}


def batch_losses(model: MTModel, batch: Batch, weights: LossWeights, kl_weight: float = 1.0):
    _, card, cost, logp, pos = model.forward(batch)
    lc = log_qerror_loss(card, batch.card, batch.valid)
    lk = log_qerror_loss(cost, batch.cost, batch.valid)
    lj = l_jo_token(logp, batch.order, batch.step_mask)
    if pos is not None:
        lj = T.add(lj, T.mul(l_kl_position(pos, batch.positions, batch.step_mask), kl_weight))
    total = l_qo(lc, lk, lj, weights)
    return total, {"card": lc.item(), "cost": lk.item(), "jo": lj.item(), "qo": total.item()}


def evaluate_loss(model: MTModel, records: Sequence[TrainRecord], cfg: TrainConfig) -> dict[str, float]:
    """Record-weighted mean of each loss term over a full pass, no updates."""
    sums: dict[str, float] = {}
    with T.no_grad():
        for s in range(0, len(records), cfg.batch_size):
            chunk = records[s:s + cfg.batch_size]
            _, parts = batch_losses(model, collate(chunk, model.cfg), cfg.weights, cfg.kl_weight)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(chunk)
    return {k: v / len(records) for k, v in sums.items()}


def train_joint(model: MTModel, records: Sequence[TrainRecord], cfg: TrainConfig,
                state: T.AdamState | None = None) -> list[dict[str, float]]:
    """Token-level joint training on ``records`` (shuffled per epoch).

    Returns one evaluation per epoch; entry 0 is taken before any update.
    """
    if not records:
        raise ValueError("no training records")
    records = list(records)
    params = model.named_parameters()
    state = state or T.AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = [evaluate_loss(model, records, cfg)]
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(records))
        for s in range(0, len(perm), cfg.batch_size):
            batch = collate([records[i] for i in perm[s:s + cfg.batch_size]], model.cfg)
            total, _ = batch_losses(model, batch, cfg.weights, cfg.kl_weight)
            model.zero_grad()
            total.backward()
            T.adam_step(params, state)
        history.append(evaluate_loss(model, records, cfg))
    return history


def _seq_loss_one(model: MTModel, rec: TrainRecord, cfg: TrainConfig):
    S = model.forward_shared(rec.x[None])
    slots = list(rec.tables)
    score = model.scorer(T.Tensor(S.data), slots)
    legal, illegal = beam_search_unconstrained(score, slots, rec.adjacency, cfg.beam_k, cfg.beam_cap)
    star = tuple(rec.order)
    legal_orders = [tuple(slots[i] for i in c.order) for c in legal]
    illegal_orders = [tuple(slots[i] for i in c.order) for c in illegal]
    orders = [star] + legal_orders + illegal_orders
    lp = model.sequence_logprob(S, orders, slots)
    n_l = len(legal_orders)
    seq = l_seq(
        T.getitem(lp, 0),
        T.getitem(lp, slice(1, 1 + n_l)),
        [joeu(u, star) for u in legal_orders],
        T.getitem(lp, slice(1 + n_l, None)),
        cfg.lam,
    )
    card = log_qerror_loss(model.predict_card(S), rec.card[None])
    cost = log_qerror_loss(model.predict_cost(S), rec.cost[None])
    return l_qo(card, cost, seq, cfg.weights)


def seq_finetune(model: MTModel, records: Sequence[TrainRecord], cfg: TrainConfig,
                 state: T.AdamState | None = None) -> list[float]:
    """Sequence-level fine-tuning with beam candidate sets; returns mean loss per epoch."""
    params = model.named_parameters()
    state = state or T.AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    records = list(records)
    history = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(records))
        total = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            model.zero_grad()
            for i in idx:
                loss = T.mul(_seq_loss_one(model, records[i], cfg), 1.0 / len(idx))
                loss.backward()
                total += loss.item() * len(idx)
            T.adam_step(params, state)
        history.append(total / len(records))
    return history


# ---------------------------------------------------------------------------
# evaluation


def predict_order(model: MTModel, rec: TrainRecord, k: int = 4, cap: Optional[int] = 64) -> tuple[int, ...]:
    """Best legal order as table slots."""
    S = model.encode_one(rec.x)
    slots = list(rec.tables)
    best = beam_search_constrained(model.scorer(S, slots), slots, rec.adjacency, k, cap)[0]
    return tuple(slots[i] for i in best.order)


def predict_estimates(model: MTModel, rec: TrainRecord) -> tuple[np.ndarray, np.ndarray]:
    """Per-node log-cardinality and log-cost predictions."""
    with T.no_grad():
        S = model.forward_shared(rec.x[None])
        return model.predict_card(S).data[0], model.predict_cost(S).data[0]


def is_legal_slots(order: Sequence[int], rec: TrainRecord) -> bool:
    from .decode import is_legal_order

    pos = {s: i for i, s in enumerate(rec.tables)}
    if sorted(order) != sorted(rec.tables):
        return False
    return is_legal_order([pos[s] for s in order], rec.adjacency)


def random_legal_order(rng: np.random.Generator, adjacency) -> tuple[int, ...]:
    """Uniform first table, then a uniform pick from the frontier at every step."""
    rows = adjacency_rows(adjacency)
    m = len(rows)
    first = int(rng.integers(m))
    order = [first]
    joined, frontier = frontier_update(0, rows, first)
    while len(order) < m:
        opts = [i for i in range(m) if frontier >> i & 1]
        nxt = opts[int(rng.integers(len(opts)))]
        order.append(nxt)
        joined, frontier = frontier_update(joined, rows, nxt)
    return tuple(order)


def random_baseline_joeu(records: Sequence[TrainRecord], n_samples: int = 1000, seed: int = 0) -> np.ndarray:
    """Per-query Monte-Carlo expected JOEU of a random legal order."""
    rng = np.random.default_rng(seed)
    out = np.empty(len(records))
    for j, rec in enumerate(records):
        star = [rec.tables.index(s) for s in rec.order]
        out[j] = np.mean([joeu(random_legal_order(rng, rec.adjacency), star) for _ in range(n_samples)])
    return out


def bootstrap_ci(values: Sequence[float], n_boot: int = 2000, seed: int = 0, alpha: float = 0.05):
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        return (math.nan, math.nan)
    rng = np.random.default_rng(seed)
    means = vals[rng.integers(0, vals.size, size=(n_boot, vals.size))].mean(axis=1)
    return (float(np.quantile(means, alpha / 2)), float(np.quantile(means, 1 - alpha / 2)))
