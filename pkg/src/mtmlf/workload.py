"""Queries, plan trees, workload generation and evaluation metrics."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .schema_gen import ConfigError, Database, JoinPredicate, JoinSchema
from .tensor import atomic_write_bytes

WORKLOAD_VERSION = 1
INDEX_SCAN_THRESHOLD = 0.05
MAX_QUERY_TABLES = 8
OPS = ("eq", "lt", "gt", "range")
SCAN_KINDS = ("seq", "index")
JOIN_KINDS = ("hash", "nestedloop", "merge")


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Predicate:
    """One filter atom on ``table.column``.

    ``lt``/``gt`` are strict, ``range`` is inclusive on both ends.
    """

    table: str
    column: str
    op: str
    values: tuple[int, ...]

    def __post_init__(self):
        if self.op not in OPS:
            raise DomainError(f"unknown predicate op {self.op!r}")
        need = 2 if self.op == "range" else 1
        if len(self.values) != need:
            raise DomainError(f"{self.op} takes {need} operand(s)")

    def mask(self, col: np.ndarray) -> np.ndarray:
        v = self.values
        if self.op == "eq":
            return col == v[0]
        if self.op == "lt":
            return col < v[0]
        if self.op == "gt":
            return col > v[0]
        return (col >= v[0]) & (col <= v[1])

    def satisfying_values(self, domain_size: int) -> np.ndarray:
        return self.mask(np.arange(domain_size))


@dataclass(frozen=True)
class Query:
    tables: tuple[str, ...]
    joins: tuple[JoinPredicate, ...] = ()
    filters: tuple[Predicate, ...] = ()

    def filters_on(self, table: str) -> tuple[Predicate, ...]:
        return tuple(p for p in self.filters if p.table == table)

    @property
    def m(self) -> int:
        return len(self.tables)

    def index(self, table: str) -> int:
        return self.tables.index(table)

    def mask_of(self, tables: Iterable[str]) -> int:
        mask = 0
        for t in tables:
            mask |= 1 << self.tables.index(t)
        return mask

    def tables_of(self, mask: int) -> tuple[str, ...]:
        return tuple(t for i, t in enumerate(self.tables) if mask >> i & 1)

    def adjacency_bits(self) -> list[int]:
        bits = [0] * self.m
        for jp in self.joins:
            i, j = self.index(jp.left_table), self.index(jp.right_table)
            bits[i] |= 1 << j
            bits[j] |= 1 << i
        return bits

    def is_connected(self, mask: int | None = None) -> bool:
        return is_connected_mask(self.adjacency_bits(), (1 << self.m) - 1 if mask is None else mask)


def is_connected_mask(adj_bits: list[int], mask: int) -> bool:
    if mask == 0:
        return False
    start = mask & -mask
    seen = start
    frontier = start
    while frontier:
        low = frontier & -frontier
        frontier ^= low
        nb = adj_bits[low.bit_length() - 1] & mask & ~seen
        seen |= nb
        frontier |= nb
    return seen == mask


# ---------------------------------------------------------------------------
# plan trees


@dataclass(frozen=True)
class Scan:
    table: str
    kind: str = "seq"
    filters: tuple[Predicate, ...] = ()
    rows: int = 0

    def __post_init__(self):
        if self.kind not in SCAN_KINDS:
            raise ValueError(f"unknown scan kind {self.kind!r}")


@dataclass(frozen=True)
class Join:
    left: "PlanNode"
    right: "PlanNode"
    kind: str = "hash"

    def __post_init__(self):
        if self.kind not in JOIN_KINDS:
            raise ValueError(f"unknown join kind {self.kind!r}")


PlanNode = Union[Scan, Join]


def leaves(node: PlanNode) -> tuple[str, ...]:
    if isinstance(node, Scan):
        return (node.table,)
    return leaves(node.left) + leaves(node.right)


def preorder(node: PlanNode) -> list[PlanNode]:
    out = []
    stack = [node]
    while stack:
        n = stack.pop()
        out.append(n)
        if isinstance(n, Join):
            stack.append(n.right)
            stack.append(n.left)
    return out


def preorder_paths(node: PlanNode, path: str = "") -> list[tuple[PlanNode, str]]:
    """Pre-order nodes paired with their root path ("L"/"R" steps)."""
    out = [(node, path)]
    if isinstance(node, Join):
        out += preorder_paths(node.left, path + "L")
        out += preorder_paths(node.right, path + "R")
    return out


def tree_shape(node: PlanNode):
    """Nested tuples of table names; leaves are strings."""
    if isinstance(node, Scan):
        return node.table
    return (tree_shape(node.left), tree_shape(node.right))


def left_deep_order(node: PlanNode) -> tuple[str, ...]:
    if isinstance(node, Scan):
        return (node.table,)
    if not isinstance(node.right, Scan):
        raise ValueError("plan is not left-deep")
    return left_deep_order(node.left) + (node.right.table,)


# ---------------------------------------------------------------------------
# single-table statistics used by the heuristic planner


class ColumnStats:
    """Per-column value frequencies; selectivities assume attribute independence."""

    def __init__(self, db: Database):
        self.db = db
        self._hist: dict[tuple[str, str], np.ndarray] = {}

    def hist(self, table: str, column: str) -> np.ndarray:
        key = (table, column)
        if key not in self._hist:
            spec = self.db.schema.table(table)
            d = spec.column(column).domain_size
            col = self.db.column(table, column)
            self._hist[key] = np.bincount(col, minlength=d)[:d] / max(len(col), 1)
        return self._hist[key]

    def selectivity(self, table: str, preds: Iterable[Predicate]) -> float:
        sel = 1.0
        for p in preds:
            h = self.hist(table, p.column)
            sel *= float(h[p.satisfying_values(len(h))].sum())
        return sel

    def estimate(self, table: str, preds: Iterable[Predicate]) -> float:
        return self.db.rows(table) * self.selectivity(table, preds)


def scan_for(query: Query, table: str, db: Database, stats: ColumnStats | None = None) -> Scan:
    stats = stats or ColumnStats(db)
    preds = query.filters_on(table)
    sel = stats.selectivity(table, preds)
    kind = "index" if sel < INDEX_SCAN_THRESHOLD else "seq"
    return Scan(table, kind, preds, db.rows(table))


def build_left_deep(order: Iterable[str], query: Query, db: Database,
                    stats: ColumnStats | None = None, join_kind: str = "hash") -> PlanNode:
    stats = stats or ColumnStats(db)
    order = list(order)
    if sorted(order) != sorted(query.tables):
        raise ValueError("order must contain each query table exactly once")
    node: PlanNode = scan_for(query, order[0], db, stats)
    for t in order[1:]:
        node = Join(node, scan_for(query, t, db, stats), join_kind)
    return node


def build_tree(shape, query: Query, db: Database, stats: ColumnStats | None = None,
               join_kind: str = "hash") -> PlanNode:
    stats = stats or ColumnStats(db)
    if isinstance(shape, str):
        return scan_for(query, shape, db, stats)
    return Join(build_tree(shape[0], query, db, stats, join_kind),
                build_tree(shape[1], query, db, stats, join_kind), join_kind)


def initial_plan(query: Query, db: Database, stats: ColumnStats | None = None) -> PlanNode:
    """Heuristic left-deep plan: cheapest estimated table first, then the
    cheapest table adjacent to what has been joined (no cross products)."""
    stats = stats or ColumnStats(db)
    idx = {t: db.schema.table_index(t) for t in query.tables}
    key = {t: (stats.estimate(t, query.filters_on(t)), db.rows(t), idx[t]) for t in query.tables}
    adj = query.adjacency_bits()
    order = [min(query.tables, key=key.__getitem__)]
    joined = query.mask_of(order)
    while len(order) < query.m:
        frontier = 0
        for i in range(query.m):
            if joined >> i & 1:
                frontier |= adj[i]
        frontier &= ~joined
        cands = query.tables_of(frontier) or query.tables_of(((1 << query.m) - 1) & ~joined)
        nxt = min(cands, key=key.__getitem__)
        order.append(nxt)
        joined |= 1 << query.index(nxt)
    return build_left_deep(order, query, db, stats)


# ---------------------------------------------------------------------------
# generation


@dataclass
class QueryConfig:
    min_tables: int = 2
    max_tables: int = 6
    predicate_density: float = 0.6
    max_atoms: int = 2

    def validate(self, n_tables: int | None = None) -> None:
        if not 1 <= self.min_tables <= self.max_tables:
            raise ConfigError(f"bad table range [{self.min_tables}, {self.max_tables}]")
        if self.max_tables > MAX_QUERY_TABLES:
            raise ConfigError(f"queries touch at most {MAX_QUERY_TABLES} tables")
        if n_tables is not None and self.max_tables > n_tables:
            raise ConfigError(f"max_tables={self.max_tables} exceeds the {n_tables} schema tables")
        if not 0 <= self.max_atoms <= 2:
            raise ConfigError("0-2 filter atoms per table")


def _random_atom(rng: np.random.Generator, db: Database, table: str, column: str) -> Predicate:
    spec = db.schema.table(table).column(column)
    col = db.column(table, column)
    d = spec.domain_size
    x = int(col[rng.integers(0, len(col))])
    if spec.kind == "categorical":
        return Predicate(table, column, "eq", (x,))
    op = OPS[1 + int(rng.integers(0, 3))]
    if op == "lt":
        return Predicate(table, column, "lt", (x + 1,)) if x + 1 < d else Predicate(table, column, "range", (0, x))
    if op == "gt":
        return Predicate(table, column, "gt", (x - 1,)) if x >= 1 else Predicate(table, column, "range", (x, d - 1))
    y = int(col[rng.integers(0, len(col))])
    return Predicate(table, column, "range", (min(x, y), max(x, y)))


def random_filter(rng: np.random.Generator, db: Database, table: str, n_atoms: int) -> tuple[Predicate, ...]:
    cols = db.schema.table(table).attribute_names
    n_atoms = min(n_atoms, len(cols))
    picked = sorted(rng.choice(len(cols), size=n_atoms, replace=False).tolist())
    return tuple(_random_atom(rng, db, table, cols[c]) for c in picked)


def gen_query(db: Database, seed, cfg: QueryConfig | None = None) -> Query:
    cfg = cfg or QueryConfig()
    schema = db.schema
    cfg.validate(len(schema.tables))
    rng = np.random.default_rng(seed)
    nb = schema.neighbors()
    m = int(rng.integers(cfg.min_tables, cfg.max_tables + 1))
    chosen = [schema.names[int(rng.integers(0, len(schema.names)))]]
    while len(chosen) < m:
        frontier = sorted({n for t in chosen for n in nb[t]} - set(chosen), key=schema.table_index)
        chosen.append(frontier[int(rng.integers(0, len(frontier)))])
    tables = tuple(sorted(chosen, key=schema.table_index))
    edges = schema.join_edges()
    joins = tuple(edges[frozenset((a, b))] for i, a in enumerate(tables) for b in tables[i + 1:]
                  if frozenset((a, b)) in edges)
    filters: list[Predicate] = []
    for t in tables:
        if cfg.max_atoms and rng.random() < cfg.predicate_density:
            filters += random_filter(rng, db, t, int(rng.integers(1, cfg.max_atoms + 1)))
    return Query(tables, joins, tuple(filters))


def gen_single_table_query(db: Database, table: str, seed, empty_prob: float = 0.05,
                           max_atoms: int = 2) -> Query:
    rng = np.random.default_rng(seed)
    if rng.random() < empty_prob:
        return Query((table,))
    return Query((table,), (), random_filter(rng, db, table, int(rng.integers(1, max_atoms + 1))))


# ---------------------------------------------------------------------------
# workload records


@dataclass
class WorkloadItem:
    query: Query
    plan: PlanNode
    card: Optional[list[float]] = None
    cost: Optional[list[float]] = None
    optimal_order: Optional[tuple[str, ...]] = None
    optimal_cost: Optional[float] = None
    greedy_order: Optional[tuple[str, ...]] = None
    greedy_cost: Optional[float] = None
    subset_cards: dict[int, float] = field(default_factory=dict)
    optimal_tree: Optional[object] = None  # nested tuples of table names, bushy labels only

    @property
    def labeled(self) -> bool:
        return self.card is not None


def predicate_to_json(p: Predicate) -> list:
    return [p.table, p.column, p.op, list(p.values)]


def predicate_from_json(x) -> Predicate:
    return Predicate(x[0], x[1], x[2], tuple(int(v) for v in x[3]))


def query_to_dict(q: Query) -> dict:
    return {
        "tables": list(q.tables),
        "joins": [[j.left_table, j.left_column, j.right_table, j.right_column, j.kind, j.fact] for j in q.joins],
        "filters": [predicate_to_json(p) for p in q.filters],
    }


def query_from_dict(d: dict) -> Query:
    return Query(tuple(d["tables"]),
                 tuple(JoinPredicate(*j) for j in d["joins"]),
                 tuple(predicate_from_json(p) for p in d["filters"]))


def plan_to_dict(node: PlanNode) -> dict:
    if isinstance(node, Scan):
        return {"op": node.kind, "table": node.table, "rows": node.rows,
                "filters": [predicate_to_json(p) for p in node.filters]}
    return {"op": node.kind, "left": plan_to_dict(node.left), "right": plan_to_dict(node.right)}


def plan_from_dict(d: dict) -> PlanNode:
    if d["op"] in SCAN_KINDS:
        return Scan(d["table"], d["op"], tuple(predicate_from_json(p) for p in d["filters"]), int(d["rows"]))
    return Join(plan_from_dict(d["left"]), plan_from_dict(d["right"]), d["op"])


def item_to_dict(item: WorkloadItem) -> dict:
    d = {"v": WORKLOAD_VERSION, "query": query_to_dict(item.query), "plan": plan_to_dict(item.plan)}
    if item.labeled:
        d.update({
            "card": item.card, "cost": item.cost,
            "optimal_order": list(item.optimal_order), "optimal_cost": item.optimal_cost,
            "greedy_order": list(item.greedy_order), "greedy_cost": item.greedy_cost,
            "subset_cards": {str(k): v for k, v in sorted(item.subset_cards.items())},
        })
        if item.optimal_tree is not None:
            d["optimal_tree"] = item.optimal_tree
    return d


def _tree_from_json(x):
    return x if isinstance(x, str) else (_tree_from_json(x[0]), _tree_from_json(x[1]))


def item_from_dict(d: dict) -> WorkloadItem:
    if d.get("v") != WORKLOAD_VERSION:
        raise ValueError(f"unsupported workload record version {d.get('v')!r}")
    item = WorkloadItem(query_from_dict(d["query"]), plan_from_dict(d["plan"]))
    if "card" in d:
        item.card = [float(x) for x in d["card"]]
        item.cost = [float(x) for x in d["cost"]]
        item.optimal_order = tuple(d["optimal_order"])
        item.optimal_cost = float(d["optimal_cost"])
        item.greedy_order = tuple(d["greedy_order"])
        item.greedy_cost = float(d["greedy_cost"])
        item.subset_cards = {int(k): float(v) for k, v in d["subset_cards"].items()}
        if "optimal_tree" in d:
            item.optimal_tree = _tree_from_json(d["optimal_tree"])
    return item


def dump_workload(items: Iterable[WorkloadItem]) -> bytes:
    lines = [json.dumps(item_to_dict(it), sort_keys=True, separators=(",", ":")) for it in items]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def save_workload(path, items: Iterable[WorkloadItem]) -> None:
    atomic_write_bytes(path, dump_workload(items))


def load_workload(path) -> list[WorkloadItem]:
    with open(path, encoding="utf-8") as fh:
        return [item_from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# metrics


def q_error(estimate: float, truth: float) -> float:
    if not (estimate > 0 and truth > 0):
        raise DomainError(f"q-error needs positive inputs, got {estimate}, {truth}")
    return max(estimate / truth, truth / estimate)


def q_error_stats(errors: Iterable[float]) -> dict[str, float]:
    arr = np.asarray(list(errors), dtype=np.float64)
    if arr.size == 0:
        return {"median": math.nan, "max": math.nan, "mean": math.nan}
    return {"median": float(np.median(arr)), "max": float(arr.max()), "mean": float(arr.mean())}


def improvement_ratio(baseline_total: float, candidate_total: float) -> float:
    if not baseline_total > 0:
        raise DomainError("baseline total must be positive")
    return (baseline_total - candidate_total) / baseline_total
