"""Exact labels: join cardinalities, an analytic plan cost model, optimal join
orders by subset dynamic programming, and join-distribution reconstruction.

Cardinalities of a query's sub-joins follow equivalence-class semantics:
join keys that the full query equates (directly or transitively) are equated
in every sub-join that contains both tables.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from .schema_gen import Database
from .tensor import ShapeError
from .workload import (
    ColumnStats, DomainError, Join, PlanNode, Predicate, Query, Scan, WorkloadItem,
    build_left_deep, initial_plan, is_connected_mask, leaves, preorder,
)

DEFAULT_MAX_TABLES = 8


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    c_seqscan: float = 1.0
    c_idxscan: float = 1.0
    c_hash_build: float = 1.0
    c_hash_probe: float = 1.0
    c_nl: float = 1.0
    c_merge: float = 1.0
    c_output: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")


# ---------------------------------------------------------------------------
# cardinality


def filter_mask(db: Database, table: str, preds: Iterable[Predicate]) -> np.ndarray:
    mask = np.ones(db.rows(table), dtype=bool)
    for p in preds:
        mask &= p.mask(db.column(table, p.column))
    return mask


class CardinalityOracle:
    """Exact join sizes for every subset of one query's tables.

    Each table contributes its filtered rows grouped by join-key classes; a
    subset's factor is built from a smaller connected subset plus one table
    and projected onto the key classes still needed by the rest of the query.
    """

    def __init__(self, db: Database, query: Query):
        self.db = db
        self.query = query
        self.m = query.m
        self.adj = query.adjacency_bits()
        parent: dict[tuple[str, str], tuple[str, str]] = {}

        def find(x):
            while parent.setdefault(x, x) != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for jp in query.joins:
            a, b = find((jp.left_table, jp.left_column)), find((jp.right_table, jp.right_column))
            if a != b:
                parent[max(a, b)] = min(a, b)
        roots = sorted({find(x) for x in list(parent)})
        var_id = {r: i for i, r in enumerate(roots)}
        self.table_vars: list[dict[str, str]] = []
        for t in query.tables:
            cols = {}
            for (tt, col) in list(parent):
                if tt == t:
                    cols[col] = f"v{var_id[find((tt, col))]}"
            self.table_vars.append(cols)
        self._vars = [frozenset(c.values()) for c in self.table_vars]
        self._base: dict[int, pd.DataFrame] = {}
        self._factor: dict[int, pd.DataFrame] = {}
        self._card: dict[int, float] = {}

    def _vars_of(self, mask: int) -> frozenset:
        out: frozenset = frozenset()
        for i in range(self.m):
            if mask >> i & 1:
                out |= self._vars[i]
        return out

    def _base_factor(self, i: int) -> pd.DataFrame:
        if i not in self._base:
            t = self.query.tables[i]
            keep = filter_mask(self.db, t, self.query.filters_on(t))
            cols = self.table_vars[i]
            df = pd.DataFrame({var: self.db.column(t, col)[keep] for col, var in sorted(cols.items())})
            if len(set(cols.values())) != len(cols):
                raise NotImplementedError("two columns of one table in the same key class")
            if cols:
                df = df.groupby(sorted(df.columns), sort=True).size().rename("cnt").reset_index()
                df["cnt"] = df["cnt"].astype(np.float64)
            else:
                df = pd.DataFrame({"cnt": [float(keep.sum())]})
            self._base[i] = df
        return self._base[i]

    @staticmethod
    def _project(df: pd.DataFrame, keep: Iterable[str]) -> pd.DataFrame:
        keep = sorted(keep)
        if not keep:
            return pd.DataFrame({"cnt": [float(df["cnt"].sum())]})
        return df.groupby(keep, sort=True)["cnt"].sum().reset_index()

    def _factor_of(self, mask: int) -> pd.DataFrame:
        if mask in self._factor:
            return self._factor[mask]
        full = (1 << self.m) - 1
        needed = self._vars_of(mask) & self._vars_of(full & ~mask)
        if mask & (mask - 1) == 0:
            i = mask.bit_length() - 1
            f = self._project(self._base_factor(i), needed & self._vars[i])
        else:
            split = None
            for i in reversed(range(self.m)):
                if mask >> i & 1 and is_connected_mask(self.adj, mask & ~(1 << i)):
                    split = i
                    break
            if split is None:
                raise ValueError("factor requested for a disconnected subset")
            rest = self._factor_of(mask & ~(1 << split))
            base = self._project(self._base_factor(split), self._vars[split])
            on = sorted((set(rest.columns) & set(base.columns)) - {"cnt"})
            if on:
                merged = rest.merge(base, on=on, how="inner", suffixes=("_l", "_r"))
            else:
                merged = rest.merge(base, how="cross", suffixes=("_l", "_r"))
            merged["cnt"] = merged["cnt_l"] * merged["cnt_r"]
            f = self._project(merged.drop(columns=["cnt_l", "cnt_r"]), needed)
        self._factor[mask] = f
        return f

    def cardinality(self, mask: int | None = None) -> float:
        full = (1 << self.m) - 1
        mask = full if mask is None else mask
        if mask in self._card:
            return self._card[mask]
        if is_connected_mask(self.adj, mask):
            val = float(self._factor_of(mask)["cnt"].sum())
        else:
            # cross product of connected components
            val, rest = 1.0, mask
            while rest:
                comp = _component(self.adj, rest)
                val *= self.cardinality(comp)
                rest &= ~comp
        self._card[mask] = val
        return val

    def connected_subsets(self) -> list[int]:
        return [s for s in range(1, 1 << self.m) if is_connected_mask(self.adj, s)]

    def all_connected(self) -> dict[int, float]:
        return {s: self.cardinality(s) for s in self.connected_subsets()}


def _component(adj: list[int], mask: int) -> int:
    start = mask & -mask
    seen = frontier = start
    while frontier:
        low = frontier & -frontier
        frontier ^= low
        nb = adj[low.bit_length() - 1] & mask & ~seen
        seen |= nb
        frontier |= nb
    return seen


def _as_int(x: float) -> int:
    return int(round(x))


def true_cardinality(db: Database, query: Query, tables: Iterable[str] | None = None) -> int:
    """Exact row count of ``query`` (or of its sub-join over ``tables``)."""
    oracle = CardinalityOracle(db, query)
    mask = None if tables is None else query.mask_of(tables)
    return _as_int(oracle.cardinality(mask))


def subset_cardinalities(db: Database, query: Query) -> dict[int, float]:
    return CardinalityOracle(db, query).all_connected()


def plan_cardinalities(plan: PlanNode, query: Query, cards: dict[int, float] | CardinalityOracle) -> list[float]:
    """Output cardinality of every plan node, in pre-order."""
    out = []
    for node in preorder(plan):
        mask = query.mask_of(leaves(node))
        if isinstance(cards, CardinalityOracle):
            out.append(cards.cardinality(mask))
        else:
            out.append(cards[mask])
    return out


# ---------------------------------------------------------------------------
# cost model


def _join_cost(kind: str, left, right, out, p: CostParams, exact: bool = False):
    c = (lambda x: Fraction(x)) if exact else float
    if kind == "hash":
        small, large = (left, right) if left <= right else (right, left)
        return c(p.c_hash_build) * small + c(p.c_hash_probe) * large + c(p.c_output) * out
    if kind == "nestedloop":
        return c(p.c_nl) * left * right
    if kind == "merge":
        return c(p.c_merge) * (left + right) + c(p.c_output) * out
    raise ValueError(f"unknown join kind {kind!r}")


def _scan_cost(node: Scan, out, p: CostParams, exact: bool = False):
    c = (lambda x: Fraction(x)) if exact else float
    if node.kind == "seq":
        return c(p.c_seqscan) * node.rows
    return c(p.c_idxscan) * out


def plan_costs(plan: PlanNode, cards: list[float], params: CostParams | None = None) -> list[float]:
    """Cost of the sub-plan rooted at each node, in pre-order."""
    params = params or CostParams()
    nodes = preorder(plan)
    if len(cards) != len(nodes):
        raise ShapeError(f"{len(cards)} cardinalities for {len(nodes)} plan nodes")
    pos = {id(n): i for i, n in enumerate(nodes)}
    sub = [0.0] * len(nodes)
    for i in reversed(range(len(nodes))):
        n = nodes[i]
        if isinstance(n, Scan):
            sub[i] = _scan_cost(n, cards[i], params)
        else:
            li, ri = pos[id(n.left)], pos[id(n.right)]
            sub[i] = sub[li] + sub[ri] + _join_cost(n.kind, cards[li], cards[ri], cards[i], params)
    return sub


def cost_of_plan(plan: PlanNode, cards: list[float], params: CostParams | None = None) -> float:
    return plan_costs(plan, cards, params)[0]


# ---------------------------------------------------------------------------
# join ordering


@dataclass
class OrderResult:
    order: object  # tuple of table names (left-deep) or nested tuple (bushy)
    cost: float


def _scan_costs(query: Query, db: Database, cards: dict[int, float], params: CostParams,
                stats: ColumnStats) -> list[Fraction]:
    from .workload import scan_for

    out = []
    for i, t in enumerate(query.tables):
        out.append(_scan_cost(scan_for(query, t, db, stats), Fraction(cards[1 << i]), params, exact=True))
    return out


def canonical_left_deep(order: tuple[int, ...], cards: dict[int, float]) -> tuple[int, ...]:
    """Hash joins are symmetric in their inputs, so the first two tables can
    swap at equal cost; put the smaller (then lower-indexed) one first."""
    if len(order) < 2:
        return order
    a, b = order[0], order[1]
    if (cards[1 << b], b) < (cards[1 << a], a):
        return (b, a) + order[2:]
    return order


def left_deep_cost(order: Iterable[int], cards: dict[int, float], scan_costs: list,
                   params: CostParams, exact: bool = False):
    order = list(order)
    cast = Fraction if exact else float
    total = sum((cast(scan_costs[i]) for i in order), cast(0))
    mask = 1 << order[0]
    for t in order[1:]:
        new = mask | (1 << t)
        total += _join_cost("hash", cast(cards[mask]), cast(cards[1 << t]), cast(cards[new]), params, exact)
        mask = new
    return total


def optimal_join_order(db: Database, query: Query, params: CostParams | None = None,
                       mode: str = "left_deep", max_tables: int = DEFAULT_MAX_TABLES,
                       cards: dict[int, float] | None = None,
                       stats: ColumnStats | None = None) -> OrderResult:
    """Exact minimum-cost join order by dynamic programming over connected subsets.

    Ties are broken towards the lexicographically smallest table-index
    sequence; the left-deep result is then canonicalised so the smaller of
    the first two tables leads.
    """
    params = params or CostParams()
    m = query.m
    if m > max_tables:
        raise CapacityError(f"{m} tables exceeds the exact-search cap of {max_tables}")
    if not query.is_connected():
        raise ValueError("query join graph is disconnected")
    stats = stats or ColumnStats(db)
    if cards is None:
        cards = subset_cardinalities(db, query)
    adj = query.adjacency_bits()
    scans = _scan_costs(query, db, cards, params, stats)
    subsets = sorted((s for s in range(1, 1 << m) if is_connected_mask(adj, s)),
                     key=lambda s: (bin(s).count("1"), s))
    if mode == "left_deep":
        best: dict[int, tuple[Fraction, tuple[int, ...]]] = {}
        for s in subsets:
            if s & (s - 1) == 0:
                i = s.bit_length() - 1
                best[s] = (scans[i], (i,))
                continue
            cand = None
            for i in range(m):
                if not s >> i & 1:
                    continue
                rest = s & ~(1 << i)
                if rest not in best or not adj[i] & rest:
                    continue
                c = best[rest][0] + scans[i] + _join_cost(
                    "hash", Fraction(cards[rest]), Fraction(cards[1 << i]), Fraction(cards[s]), params, True)
                key = (c, best[rest][1] + (i,))
                if cand is None or key < cand:
                    cand = key
            best[s] = cand
        cost, order = best[(1 << m) - 1]
        order = canonical_left_deep(order, cards)
        return OrderResult(tuple(query.tables[i] for i in order), float(cost))
    if mode == "bushy":
        bb: dict[int, tuple[Fraction, object]] = {}
        for s in subsets:
            if s & (s - 1) == 0:
                i = s.bit_length() - 1
                bb[s] = (scans[i], i)
                continue
            cand = None
            sub = (s - 1) & s
            while sub:
                other = s & ~sub
                if sub in bb and other in bb and _touches(adj, sub, other):
                    left, right = (sub, other) if (cards[sub], sub) <= (cards[other], other) else (other, sub)
                    c = bb[sub][0] + bb[other][0] + _join_cost(
                        "hash", Fraction(cards[left]), Fraction(cards[right]), Fraction(cards[s]), params, True)
                    key = (c, left)
                    if cand is None or key < cand[0]:
                        cand = (key, (bb[left][1], bb[right][1]))
                sub = (sub - 1) & s
            bb[s] = (cand[0][0], cand[1])
        cost, shape = bb[(1 << m) - 1]
        return OrderResult(_name_shape(shape, query), float(cost))
    raise ValueError(f"unknown mode {mode!r}")


def _touches(adj: list[int], a: int, b: int) -> bool:
    for i in range(len(adj)):
        if a >> i & 1 and adj[i] & b:
            return True
    return False


def _name_shape(shape, query: Query):
    if isinstance(shape, int):
        return query.tables[shape]
    return (_name_shape(shape[0], query), _name_shape(shape[1], query))


def greedy_baseline_order(db: Database, query: Query, params: CostParams | None = None,
                          cards: dict[int, float] | None = None) -> tuple[str, ...]:
    """Start from the smallest filtered table, then repeatedly join the adjacent
    table giving the smallest next intermediate result."""
    if cards is None:
        cards = subset_cardinalities(db, query)
    adj = query.adjacency_bits()
    m = query.m
    first = min(range(m), key=lambda i: (cards[1 << i], i))
    order, mask = [first], 1 << first
    while len(order) < m:
        cands = [i for i in range(m) if not mask >> i & 1 and adj[i] & mask]
        nxt = min(cands, key=lambda i: (cards[mask | 1 << i], i))
        order.append(nxt)
        mask |= 1 << nxt
    return tuple(query.tables[i] for i in order)


def order_cost(item: WorkloadItem, order: Iterable[str], db: Database | None = None,
               params: CostParams | None = None) -> float:
    """Cost of a left-deep hash-join order from the item's stored subset cardinalities."""
    params = params or CostParams()
    q = item.query
    idx = [q.index(t) for t in order]
    scan_nodes = {n.table: n for n in preorder(item.plan) if isinstance(n, Scan)}
    scans = [_scan_cost(scan_nodes[t], item.subset_cards[1 << i], params) for i, t in enumerate(q.tables)]
    return float(left_deep_cost(idx, item.subset_cards, scans, params))


# ---------------------------------------------------------------------------
# labeling


def label_query(db: Database, query: Query, params: CostParams | None = None,
                stats: ColumnStats | None = None, max_tables: int = DEFAULT_MAX_TABLES,
                bushy: bool = False) -> WorkloadItem:
    params = params or CostParams()
    stats = stats or ColumnStats(db)
    oracle = CardinalityOracle(db, query)
    cards = oracle.all_connected()
    plan = initial_plan(query, db, stats)
    node_cards = plan_cardinalities(plan, query, cards)
    best = optimal_join_order(db, query, params, max_tables=max_tables, cards=cards, stats=stats)
    greedy = greedy_baseline_order(db, query, params, cards)
    greedy_plan = build_left_deep(greedy, query, db, stats)
    greedy_cost = cost_of_plan(greedy_plan, plan_cardinalities(greedy_plan, query, cards), params)
    tree = None
    if bushy:
        tree = optimal_join_order(db, query, params, "bushy", max_tables, cards, stats).order
    return WorkloadItem(
        query=query, plan=plan, card=node_cards, cost=plan_costs(plan, node_cards, params),
        optimal_order=best.order, optimal_cost=best.cost,
        greedy_order=greedy, greedy_cost=greedy_cost, subset_cards=cards, optimal_tree=tree)


# ---------------------------------------------------------------------------
# join-distribution reconstruction


@dataclass
class DistTable:
    """Joint counts over (filter columns..., join key) for one table."""

    table: str
    columns: tuple[str, ...]
    key_column: str
    key_domain: tuple[int, int]
    counts: dict[tuple[int, ...], int]
    total: int

    def probabilities(self) -> dict[tuple[int, ...], Fraction]:
        return {k: Fraction(v, self.total) for k, v in self.counts.items()}

    def key_mass(self, preds: Iterable[Predicate]) -> dict[int, Fraction]:
        """P(f and key = id) for every id with nonzero mass."""
        preds = list(preds)
        for p in preds:
            if p.column not in self.columns:
                raise DomainError(f"{p.column} is not tracked by this distribution")
        pos = {c: i for i, c in enumerate(self.columns)}
        out: dict[int, int] = {}
        for key, n in self.counts.items():
            if all(bool(p.mask(np.array([key[pos[p.column]]]))[0]) for p in preds):
                out[key[-1]] = out.get(key[-1], 0) + n
        return {k: Fraction(v, self.total) for k, v in out.items()}


def build_dist_table(db: Database, table: str, columns: Iterable[str], key_column: str) -> DistTable:
    columns = tuple(columns)
    spec = db.schema.table(table)
    if key_column == spec.pk_column:
        domain = (1, spec.row_count)
    else:
        parent = db.schema.parents_of(table)[list(spec.fk_columns).index(key_column)]
        domain = (1, db.schema.table(parent).row_count)
    arrays = [db.column(table, c) for c in columns] + [db.column(table, key_column)]
    stacked = np.stack(arrays, axis=1)
    uniq, cnt = np.unique(stacked, axis=0, return_counts=True)
    counts = {tuple(int(x) for x in row): int(c) for row, c in zip(uniq, cnt)}
    return DistTable(table, columns, key_column, domain, counts, int(len(stacked)))


def join_reconstruct(dist_a: DistTable, dist_b: DistTable,
                     f_a: Iterable[Predicate] = (), f_b: Iterable[Predicate] = ()) -> Fraction:
    """Probability of ``f_a and f_b`` on the key join of A and B, from the two
    single-table distributions only: sum over key ids of P_A(f_a, id) * P_B(f_b, id)."""
    if dist_a.key_domain != dist_b.key_domain:
        raise DomainError(f"key domains differ: {dist_a.key_domain} vs {dist_b.key_domain}")
    ma, mb = dist_a.key_mass(f_a), dist_b.key_mass(f_b)
    return sum((pa * mb[k] for k, pa in ma.items() if k in mb), Fraction(0))
