"""Training objectives and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .workload import DomainError

LOG_FLOOR = -30.0
DEFAULT_LAMBDA = 10.0


@dataclass(frozen=True)
class LossWeights:
    w_card: float = 1.0
    w_cost: float = 1.0
    w_jo: float = 1.0

    def __post_init__(self):
        ws = (self.w_card, self.w_cost, self.w_jo)
        if any(w < 0 for w in ws):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")


def l_card(estimate: float, truth: float) -> float:
    """Training form |log est - log truth|."""
    if not truth > 0:
        raise DomainError(f"truth must be positive, got {truth}")
    if not estimate > 0:
        raise DomainError(f"estimate must be positive, got {estimate}")
    return abs(math.log(estimate) - math.log(truth))


l_cost = l_card


def reported_q_error(estimate: float, truth: float) -> float:
    return math.exp(l_card(estimate, truth))


def log_qerror_loss(pred_log: Tensor, target_log: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Masked mean of |pred - target| over log-space predictions."""
    diff = T.tabs(T.add(pred_log, -np.asarray(target_log, dtype=np.float64)))
    if mask is None:
        return T.mean(diff)
    mask = np.asarray(mask, dtype=np.float64)
    return T.mul(T.tsum(T.mul(diff, mask)), 1.0 / max(mask.sum(), 1.0))


def l_jo_token(logp: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Per-step cross-entropy averaged over each query's m steps, then over the batch.

    ``logp``: (B, m, N) log-probabilities; ``targets``: (B, m) slot ids;
    ``mask``: (B, m) marks real steps of shorter queries.
    """
    targets = np.asarray(targets, dtype=np.int64)
    B, m, N = logp.shape
    if mask is None:
        mask = np.ones((B, m))
    mask = np.asarray(mask, dtype=np.float64)
    onehot = np.zeros((B, m, N))
    b_idx, t_idx = np.nonzero(mask)
    onehot[b_idx, t_idx, targets[b_idx, t_idx]] = 1.0
    per_step = T.tsum(T.mul(logp, onehot), axis=-1)  # (B, m)
    weights = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1.0) / B
    return T.neg(T.tsum(T.mul(per_step, weights)))


def joeu(u: Sequence, u_star: Sequence) -> float:
    u, u_star = list(u), list(u_star)
    if len(u) != len(u_star) or not u:
        raise DomainError("join orders must be non-empty and of equal length")
    n = 0
    for a, b in zip(u, u_star):
        if a != b:
            break
        n += 1
    return n / len(u)


def l_seq(logp_star, legal_logps, legal_joeus, illegal_logps, lam: float = DEFAULT_LAMBDA,
          floor: float = LOG_FLOOR) -> Tensor:
    """-log p(u*) + sum_legal (1 - JOEU) log p(u) + lam * log sum_illegal p(u).

    Candidate log-probs are floored at ``floor`` in the second and third
    terms so that neither can decrease without bound.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    loss = T.neg(T.as_tensor(logp_star))
    legal = T.as_tensor(legal_logps)
    if legal.data.size:
        w = 1.0 - np.asarray(legal_joeus, dtype=np.float64)
        loss = T.add(loss, T.tsum(T.mul(T.clamp_min(legal, floor), w)))
    illegal = T.as_tensor(illegal_logps)
    if illegal.data.size and lam > 0:
        flat = T.reshape(T.clamp_min(illegal, floor), (1, illegal.data.size))
        loss = T.add(loss, T.mul(T.reshape(T.logsumexp(flat, axis=-1), ()), lam))
    return loss


def l_kl_position(logp: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean over steps of KL(target || prediction).

    ``logp``: (..., W) predicted log-distributions; ``target`` rows are
    normalized decoding embeddings of the same shape.
    """
    target = np.asarray(target, dtype=np.float64)
    if not np.allclose(target.sum(axis=-1)[(mask > 0) if mask is not None else ...], 1.0):
        raise DomainError("targets must be normalized distributions")
    with np.errstate(divide="ignore"):
        ent = np.where(target > 0, target * np.log(np.where(target > 0, target, 1.0)), 0.0).sum(axis=-1)
    cross = T.tsum(T.mul(logp, target), axis=-1)
    kl = T.add(T.neg(cross), ent)
    if mask is None:
        return T.mean(kl)
    mask = np.asarray(mask, dtype=np.float64)
    return T.mul(T.tsum(T.mul(kl, mask)), 1.0 / max(mask.sum(), 1.0))


def l_qo(card: Tensor, cost: Tensor, jo: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    total = None
    for w, term in ((weights.w_card, card), (weights.w_cost, cost), (weights.w_jo, jo)):
        if w == 0:
            continue
        part = T.mul(term, w)
        total = part if total is None else T.add(total, part)
    return total
