import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtmlf.schema_gen import ConfigError, GenConfig, generate_database
from mtmlf.workload import (
    ColumnStats, DomainError, Join, Predicate, Query, QueryConfig, Scan, WorkloadItem, dump_workload,
    gen_query, gen_single_table_query, improvement_ratio, initial_plan, item_from_dict, item_to_dict,
    leaves, left_deep_order, load_workload, preorder, q_error, q_error_stats, save_workload, scan_for,
)
from mtmlf.oracle import label_query

from .helpers import TINY, is_legal, tiny_db

pos = st.floats(1e-6, 1e9, allow_nan=False)


def test_q_error_examples():
    assert q_error(50, 100) == 2.0
    assert q_error(100, 100) == 1.0
    for bad in ((0, 1), (1, 0), (-1, 3)):
        with pytest.raises(DomainError):
            q_error(*bad)


@given(pos, pos)
def test_q_error_symmetric_and_at_least_one(a, b):
    assert q_error(a, b) == q_error(b, a) >= 1.0


def test_q_error_stats_layout():
    s = q_error_stats([1.0, 2.0, 9.0])
    assert s == {"median": 2.0, "max": 9.0, "mean": 4.0}
    assert all(math.isnan(v) for v in q_error_stats([]).values())


def test_improvement_ratio_examples():
    assert improvement_ratio(1143.2, 209.1) == pytest.approx(0.817, abs=5e-4)
    assert improvement_ratio(7.0, 7.0) == 0.0
    assert improvement_ratio(100, 150) == -0.5
    with pytest.raises(DomainError):
        improvement_ratio(0.0, 1.0)


def test_predicate_validation():
    with pytest.raises(DomainError):
        Predicate("t", "a", "like", (1,))
    with pytest.raises(DomainError):
        Predicate("t", "a", "range", (1,))
    col = np.arange(6)
    assert Predicate("t", "a", "lt", (2,)).mask(col).sum() == 2
    assert Predicate("t", "a", "gt", (2,)).mask(col).sum() == 3
    assert Predicate("t", "a", "range", (1, 3)).mask(col).sum() == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 50), st.integers(0, 10**6))
def test_gen_query_is_connected(db_seed, q_seed):
    db = tiny_db(db_seed)
    q = gen_query(db, q_seed, QueryConfig(min_tables=2, max_tables=4))
    assert 2 <= q.m <= 4
    assert q.is_connected()
    assert all(f.table in q.tables for f in q.filters)


def test_gen_query_up_to_eight_tables():
    db = generate_database(2, GenConfig(n_tables=(8, 8), rows=(20, 40), domain=(2, 10)))
    sizes = {gen_query(db, s, QueryConfig(min_tables=2, max_tables=8)).m for s in range(60)}
    assert min(sizes) >= 2 and max(sizes) <= 8 and len(sizes) > 3


def test_gen_query_single_table():
    q = gen_query(tiny_db(0), 3, QueryConfig(min_tables=1, max_tables=1))
    assert q.m == 1 and q.joins == ()


def test_gen_query_rejects_oversized_config():
    with pytest.raises(ConfigError):
        gen_query(tiny_db(0), 0, QueryConfig(max_tables=7))
    with pytest.raises(ConfigError):
        QueryConfig(min_tables=3, max_tables=2).validate()


def test_gen_query_is_deterministic():
    db = tiny_db(4)
    cfg = QueryConfig(max_tables=3)
    assert gen_query(db, [1, 2], cfg) == gen_query(db, [1, 2], cfg)
    assert len({gen_query(db, s, cfg) for s in range(20)}) > 1


def test_single_table_query_can_be_empty():
    db = tiny_db(1)
    t = db.schema.names[0]
    qs = [gen_single_table_query(db, t, s, empty_prob=0.5) for s in range(40)]
    assert any(not q.filters for q in qs) and any(q.filters for q in qs)
    assert all(q.tables == (t,) for q in qs)


def _two_table_query(db):
    rel = db.schema.relations[0]
    jp = db.schema.join_edges()[frozenset((rel.child_table, rel.parent_table))]
    tables = tuple(sorted((rel.child_table, rel.parent_table), key=db.schema.table_index))
    return Query(tables, (jp,))


def test_two_table_initial_plan():
    db = tiny_db(5)
    q = _two_table_query(db)
    plan = initial_plan(q, db)
    assert isinstance(plan, Join) and all(isinstance(c, Scan) for c in (plan.left, plan.right))
    assert len(preorder(plan)) == 3
    assert db.rows(plan.left.table) <= db.rows(plan.right.table)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 30), st.integers(0, 10**6))
def test_unfiltered_initial_plan_is_ascending_within_frontier(db_seed, q_seed):
    db = tiny_db(db_seed)
    q = gen_query(db, q_seed, QueryConfig(min_tables=2, max_tables=4, max_atoms=0))
    order = left_deep_order(initial_plan(q, db))
    assert is_legal(order, q)
    key = lambda t: (db.rows(t), db.schema.table_index(t))
    assert order[0] == min(q.tables, key=key)
    edges = {frozenset((j.left_table, j.right_table)) for j in q.joins}
    for k in range(1, len(order)):
        frontier = [t for t in q.tables if t not in order[:k] and any(frozenset((t, s)) in edges for s in order[:k])]
        assert order[k] == min(frontier, key=key)


def test_selective_filter_uses_index_scan():
    db = generate_database(6, GenConfig(n_tables=(4, 4), rows=(2000, 2000), domain=(100, 100)))
    stats = ColumnStats(db)
    t = db.schema.names[0]
    col = db.schema.table(t).attribute_names[0]
    h = stats.hist(t, col)
    rare = int(np.flatnonzero((h > 0) & (h < 0.02))[0])
    q = Query((t,), (), (Predicate(t, col, "eq", (rare,)),))
    assert scan_for(q, t, db, stats).kind == "index"
    assert scan_for(Query((t,)), t, db, stats).kind == "seq"


def test_workload_roundtrip(tmp_path):
    db = tiny_db(7)
    items = [label_query(db, gen_query(db, s, QueryConfig(max_tables=3)), bushy=s % 2 == 0) for s in range(6)]
    items.append(WorkloadItem(items[0].query, items[0].plan))
    path = tmp_path / "w.jsonl"
    save_workload(path, items)
    back = load_workload(path)
    assert dump_workload(back) == path.read_bytes()
    for a, b in zip(items, back):
        assert a.query == b.query and a.plan == b.plan and a.card == b.card
        assert a.optimal_order == b.optimal_order and a.subset_cards == b.subset_cards
        assert a.optimal_tree == b.optimal_tree
    assert not back[-1].labeled
    with pytest.raises(ValueError):
        item_from_dict({**item_to_dict(items[0]), "v": 99})


def test_plan_helpers():
    a, b, c = (Scan(t, "seq", (), 10) for t in "abc")
    plan = Join(Join(a, b), c)
    assert leaves(plan) == ("a", "b", "c")
    assert left_deep_order(plan) == ("a", "b", "c")
    assert [type(n).__name__ for n in preorder(plan)] == ["Join", "Join", "Scan", "Scan", "Scan"]
    with pytest.raises(ValueError):
        Scan("a", "bitmap")
