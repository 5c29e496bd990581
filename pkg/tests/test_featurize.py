import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtmlf.featurize import (
    CapacityError, EncoderTrainConfig, FeatureConfig, MalformedEmbeddingError, PRED_OPS,
    SingleTableEncoder, StateError, VocabularyError, build_records, decoding_embeddings, embed_node,
    featurize_plan, featurize_predicate, kl_targets, load_encoders, log_card, position_vector,
    save_encoders, serialize_plan, tree_from_embeddings, tree_leaves, train_single_table_encoder,
)
from mtmlf.oracle import label_query, true_cardinality
from mtmlf.schema_gen import ColumnSpec, ConfigError, GenConfig, TableSpec, generate_database
from mtmlf.workload import (
    Join, Predicate, QueryConfig, Scan, gen_query, gen_single_table_query, initial_plan,
)

from .helpers import random_tree, tiny_db

CFG = FeatureConfig(d_s=16, enc_blocks=1, enc_heads=2)


# --- predicate tokens -------------------------------------------------------


def test_empty_filter_is_sentinel():
    spec = tiny_db(0).schema.tables[0]
    (tok,) = featurize_predicate((), spec, CFG)
    assert tok.column == -1 and tok.op == PRED_OPS.index("<empty>") and tok.values == ()


def test_eq_and_range_tokens():
    db = tiny_db(0)
    spec = db.schema.tables[0]
    c = spec.attribute_names[0]
    (eq,) = featurize_predicate((Predicate(spec.name, c, "eq", (1,)),), spec, CFG)
    assert eq.column == 0 and PRED_OPS[eq.op] == "eq" and len(eq.values) == 1
    (rg,) = featurize_predicate((Predicate(spec.name, c, "range", (0, 1)),), spec, CFG)
    assert len(rg.values) == 2


def test_out_of_domain_operand():
    spec = tiny_db(0).schema.tables[0]
    c = spec.columns[0]
    with pytest.raises(VocabularyError):
        featurize_predicate((Predicate(spec.name, c.name, "eq", (c.domain_size,)),), spec, CFG)
    with pytest.raises(VocabularyError):
        featurize_predicate((Predicate(spec.name, "nope", "eq", (0,)),), spec, CFG)


def test_numeric_values_are_binned():
    spec = TableSpec("t", 10, (ColumnSpec("a0", "numeric", 1000, 0.0),))
    rows = [featurize_predicate((Predicate("t", "a0", "eq", (v,)),), spec, CFG)[0].values[0]
            for v in range(1000)]
    assert min(rows) == 0 and max(rows) == CFG.numeric_bins - 1
    assert all(a <= b for a, b in zip(rows, rows[1:]))


# --- single-table encoder ---------------------------------------------------


def _encoder_fixture():
    db = generate_database(3, GenConfig(n_tables=(3, 3), rows=(2000, 2000), n_columns=(6, 6)))
    t = db.schema.names[-1]
    qs = [gen_single_table_query(db, t, [5, i]) for i in range(400)]
    return db, t, qs, [true_cardinality(db, q) for q in qs]


def test_encoder_training_reduces_loss_and_held_out_error():
    db, t, qs, cards = _encoder_fixture()
    cfg = FeatureConfig()
    enc, hist = train_single_table_encoder(db, t, qs[:300], cfg, EncoderTrainConfig(epochs=20), cards[:300])
    assert len(hist) == 20 and hist[-1] <= 0.5 * hist[0]
    held = [q.filters for q in qs[300:]]
    tgt = np.array([log_card(c) for c in cards[300:]])
    before = np.median(np.abs(SingleTableEncoder(db.schema.table(t), cfg).predict_log_card(held) - tgt))
    after = np.median(np.abs(enc.predict_log_card(held) - tgt))
    assert after <= before


def test_encoder_on_constant_cardinality():
    db = tiny_db(2)
    t = db.schema.names[0]
    qs = [gen_single_table_query(db, t, s) for s in range(40)]
    enc, _ = train_single_table_encoder(db, t, qs, CFG, EncoderTrainConfig(epochs=30), [50.0] * len(qs))
    np.testing.assert_allclose(enc.predict_log_card([q.filters for q in qs]), np.log(50.0), atol=0.1)


def test_encoder_rejects_empty_training_set():
    db = tiny_db(2)
    with pytest.raises(ConfigError):
        train_single_table_encoder(db, db.schema.names[0], [], CFG)


def test_encoder_checkpoint_roundtrip(tmp_path):
    db = tiny_db(2)
    encs = {t: SingleTableEncoder(db.schema.table(t), CFG, seed=i) for i, t in enumerate(db.schema.names)}
    save_encoders(tmp_path / "e.mtck", {"d": encs}, CFG)
    back, cfg = load_encoders(tmp_path / "e.mtck", {"d": db})
    assert cfg == CFG
    t = db.schema.names[1]
    preds = [(), db_filter(db, t)]
    np.testing.assert_array_equal(back["d"][t].embed(preds), encs[t].embed(preds))


def db_filter(db, t):
    c = db.schema.table(t).attribute_names[0]
    return (Predicate(t, c, "lt", (1,)),)


# --- plan serialization -----------------------------------------------------


def test_sequence_lengths():
    one = Scan("a", "seq", (), 5)
    assert len(serialize_plan(one)) == 1
    for m in range(2, 9):
        assert len(serialize_plan(_left_deep_plan(m))) == 2 * m - 1


def _left_deep_plan(m):
    node = Scan("T1", "seq", (), 1)
    for i in range(2, m + 1):
        node = Join(node, Scan(f"T{i}", "seq", (), 1))
    return node


def test_positions_are_injective():
    paths = ["".join(p) for d in range(8) for p in itertools.product("LR", repeat=d)]
    vecs = {position_vector(p, 8).tobytes() for p in paths}
    assert len(vecs) == len(set(paths)) == 2 ** 8 - 1
    with pytest.raises(CapacityError):
        position_vector("L" * 8, 8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8))
def test_serialization_injective_over_shapes(seed, m):
    rng = np.random.default_rng(seed)
    a, b = random_tree(rng, m), random_tree(rng, m)
    pa = serialize_plan(_plan_of(a)).positions
    pb = serialize_plan(_plan_of(b)).positions
    same_shape = _strip(a) == _strip(b)
    assert same_shape == (pa.shape == pb.shape and (pa == pb).all())


def _plan_of(t):
    return Scan(t, "seq", (), 1) if isinstance(t, str) else Join(_plan_of(t[0]), _plan_of(t[1]))


def _strip(t):
    return "." if isinstance(t, str) else (_strip(t[0]), _strip(t[1]))


def _featurized_item(seed=3):
    db = tiny_db(seed)
    encs = {t: SingleTableEncoder(db.schema.table(t), CFG, seed=i) for i, t in enumerate(db.schema.names)}
    q = gen_query(db, 1, QueryConfig(min_tables=3, max_tables=3))
    return db, encs, q


def test_node_embeddings():
    db, encs, q = _featurized_item()
    plan = initial_plan(q, db)
    x = featurize_plan(plan, q, db, encs, CFG)
    assert x.shape == (5, CFG.d_in)
    root = x[0]
    slots = [db.schema.table_index(t) for t in q.tables]
    assert root[slots].tolist() == [1.0] * 3 and root[:CFG.n_max].sum() == 3
    # unused one-hot slots and the unused tail of the join summary stay zero
    assert (root[CFG.n_max + CFG.o_max + 2 + CFG.n_max:CFG.d_node] == 0).all()
    np.testing.assert_array_equal(featurize_plan(plan, q, db, encs, CFG), x)


def test_identical_scans_embed_identically():
    db, encs, q = _featurized_item()
    t = q.tables[0]
    s1 = Scan(t, "seq", q.filters_on(t), db.rows(t))
    s2 = Scan(t, "seq", q.filters_on(t), db.rows(t))
    np.testing.assert_array_equal(embed_node(s1, q, db, encs, CFG), embed_node(s2, q, db, encs, CFG))


def test_missing_encoder_is_a_state_error():
    db, encs, q = _featurized_item()
    del encs[q.tables[0]]
    with pytest.raises(StateError):
        featurize_plan(initial_plan(q, db), q, db, encs, CFG)


# --- decoding embeddings ----------------------------------------------------


def _unit(i, n=8):
    v = [0] * n
    v[i] = 1
    return v


def test_left_deep_example():
    masks = decoding_embeddings(((("T1", "T2"), "T3"), "T4"), m_max=4)
    assert masks["T1"].tolist() == [1, 0, 0, 0, 0, 0, 0, 0]
    assert masks["T2"].tolist() == [0, 1, 0, 0, 0, 0, 0, 0]
    assert masks["T3"].tolist() == [0, 0, 1, 1, 0, 0, 0, 0]
    assert masks["T4"].tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert tree_from_embeddings(masks) == ((("T1", "T2"), "T3"), "T4")


def test_bushy_example():
    tree = ((("T1", "T2"), ("T3", "T4")), "T5")
    masks = decoding_embeddings(tree, m_max=4)
    for i in range(4):
        assert masks[f"T{i + 1}"].tolist() == _unit(i)
    assert tree_from_embeddings(masks) == tree


def test_single_table_tree():
    masks = decoding_embeddings("T1", m_max=4)
    assert masks["T1"].tolist() == [1] * 8
    assert tree_from_embeddings(masks) == "T1"


def test_tree_too_deep():
    with pytest.raises(CapacityError):
        decoding_embeddings(_shape_of_left_deep(5), m_max=4)


def _shape_of_left_deep(m):
    t = "T1"
    for i in range(2, m + 1):
        t = (t, f"T{i}")
    return t


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 8), st.booleans())
def test_roundtrip_random_trees(seed, m, left_deep):
    tree = random_tree(np.random.default_rng(seed), m, left_deep)
    masks = decoding_embeddings(tree, 8)
    total = sum(masks.values())
    assert (total == 1).all()
    assert tree_from_embeddings(masks) == tree


@pytest.mark.parametrize("masks", [
    {"a": [1, 1, 0, 0], "b": [0, 1, 1, 1]},  # overlap
    {"a": [1, 1, 0, 0], "b": [0, 0, 1, 0]},  # gap
    {"a": [0, 1, 1, 0], "b": [1, 0, 0, 1]},  # misaligned block
    {"a": [1, 1, 1], "b": [0, 0, 0]},        # not a power of two
    {"a": [2, 0], "b": [0, 1]},              # not binary
    {"a": [1, 1], "b": [0, 0]},              # empty mask
])
def test_malformed_embeddings(masks):
    with pytest.raises(MalformedEmbeddingError):
        tree_from_embeddings({k: np.array(v) for k, v in masks.items()})


def test_kl_targets_are_distributions():
    tree = (("T1", "T2"), ("T3", "T4"))
    tgt = kl_targets(tree, tree_leaves(tree), m_max=4)
    assert tgt.shape == (4, 8)
    np.testing.assert_allclose(tgt.sum(axis=1), 1.0)


def test_build_records():
    db = tiny_db(4)
    encs = {t: SingleTableEncoder(db.schema.table(t), CFG, seed=i) for i, t in enumerate(db.schema.names)}
    items = [label_query(db, gen_query(db, s, QueryConfig(max_tables=3)), bushy=True) for s in range(5)]
    recs = build_records(db, items, encs, CFG)
    for r, it in zip(recs, items):
        assert r.x.shape == (2 * it.query.m - 1, CFG.d_in)
        assert sorted(r.order) == sorted(r.tables) and r.adjacency.shape == (r.m, r.m)
        assert r.card[0] == pytest.approx(log_card(it.card[0]))
        assert r.positions is None
    bushy = build_records(db, items, encs, CFG, bushy=True)
    assert all(r.positions.shape == (r.m, 2 ** (CFG.m_max - 1)) for r in bushy)
    unlabeled = [type(items[0])(items[0].query, items[0].plan)]
    with pytest.raises(StateError):
        build_records(db, unlabeled, encs, CFG)
