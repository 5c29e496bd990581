"""Beam-search join-order generation.

A scorer maps a batch of equal-length prefixes (slot ids) to next-step
log-probabilities over all slots. Constrained search only ever extends a
prefix with a table adjacent to what is already joined; unconstrained
search may pick any remaining table and is partitioned afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .schema_gen import Database
from .workload import ColumnStats, PlanNode, Query, build_left_deep

Scorer = Callable[[np.ndarray], np.ndarray]

DEFAULT_K = 4
DEFAULT_CAP = 64


class LegalityError(ValueError):
    pass


@dataclass(frozen=True)
class BeamCandidate:
    order: tuple[int, ...]  # positions into ``tables``
    logp: float
    joined: int
    frontier: int
    legal: bool = True


def adjacency_rows(adjacency) -> list[int]:
    adj = np.asarray(adjacency, dtype=bool)
    return [int(sum(1 << j for j in np.flatnonzero(adj[i]))) for i in range(adj.shape[0])]


def frontier_update(joined: int, rows: Sequence[int], new: int) -> tuple[int, int]:
    """Add table ``new`` to ``joined``; frontier = union of adjacency rows minus joined."""
    joined |= 1 << new
    frontier = 0
    for i in range(len(rows)):
        if joined >> i & 1:
            frontier |= rows[i]
    return joined, frontier & ~joined


def is_legal_order(order: Sequence[int], adjacency) -> bool:
    rows = adjacency_rows(adjacency)
    m = len(rows)
    if sorted(order) != list(range(m)):
        return False
    joined = 1 << order[0]
    for t in order[1:]:
        if not rows[t] & joined:
            return False
        joined |= 1 << t
    return True


def _connected(rows: list[int]) -> bool:
    m = len(rows)
    seen, stack = 1, [0]
    while stack:
        i = stack.pop()
        nxt = rows[i] & ~seen
        seen |= nxt
        stack.extend(j for j in range(m) if nxt >> j & 1)
    return seen == (1 << m) - 1


def _search(scorer: Scorer, slots: Sequence[int], rows: list[int], k: int,
            cap: Optional[int], constrained: bool) -> list[BeamCandidate]:
    if k < 1:
        raise ValueError("beam width must be at least 1")
    if cap is not None and cap < k:
        raise ValueError("cap must be at least k")
    m = len(slots)
    slots = list(slots)
    full = (1 << m) - 1
    beams = [BeamCandidate((), 0.0, 0, full, True)]
    for _ in range(m):
        prefixes = np.array([[slots[i] for i in b.order] for b in beams], dtype=np.int64).reshape(len(beams), -1)
        logp = np.asarray(scorer(prefixes), dtype=np.float64)
        nxt = []
        for b, row in zip(beams, logp):
            allowed = (b.frontier if constrained and b.order else full & ~b.joined)
            opts = [i for i in range(m) if allowed >> i & 1]
            opts.sort(key=lambda i: (-row[slots[i]], slots[i]))
            for i in opts[:k]:
                joined, frontier = frontier_update(b.joined, rows, i)
                legal = b.legal and (not b.order or bool(b.frontier >> i & 1))
                nxt.append(BeamCandidate(b.order + (i,), b.logp + float(row[slots[i]]), joined, frontier, legal))
        nxt.sort(key=lambda c: (-c.logp, tuple(slots[i] for i in c.order)))
        beams = nxt if cap is None else nxt[:cap]
    return beams


def beam_search_constrained(scorer: Scorer, slots: Sequence[int], adjacency, k: int = DEFAULT_K,
                            cap: Optional[int] = DEFAULT_CAP) -> list[BeamCandidate]:
    """Legal complete orders ranked by log-prob (ties by slot sequence)."""
    rows = adjacency_rows(adjacency)
    if len(rows) != len(slots):
        raise ValueError("adjacency size does not match table count")
    if not _connected(rows):
        raise LegalityError("join graph is disconnected; no legal order exists")
    return _search(scorer, slots, rows, k, cap, constrained=True)


def beam_search_unconstrained(scorer: Scorer, slots: Sequence[int], adjacency, k: int = DEFAULT_K,
                              cap: Optional[int] = DEFAULT_CAP):
    """All final beams, split into (legal, illegal) by prefix connectivity."""
    rows = adjacency_rows(adjacency)
    if len(rows) != len(slots):
        raise ValueError("adjacency size does not match table count")
    beams = _search(scorer, slots, rows, k, cap, constrained=False)
    return [b for b in beams if b.legal], [b for b in beams if not b.legal]


def candidate_count(m: int, k: int) -> int:
    """Final beam count on a complete graph with no cap: k^(m-k) * k!."""
    from math import factorial

    if k >= m:
        return factorial(m)
    return k ** (m - k) * factorial(k)


def order_to_plan(order: Sequence[str], query: Query, db: Database,
                  stats: ColumnStats | None = None) -> PlanNode:
    stats = stats or ColumnStats(db)
    return build_left_deep(tuple(order), query, db, stats)
