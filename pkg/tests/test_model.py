import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtmlf import tensor as T
from mtmlf.model import MTModel, ModelConfig, collate, load_model, sequence_probability
from mtmlf.oracle import CapacityError
from mtmlf.featurize import TrainRecord

CFG = ModelConfig(d_in=10, n_max=8, m_max=4, d_m=16, n_heads=2, n_blocks=1, dec_blocks=1, seed=3)


def _x(seed, L=5):
    return np.random.default_rng(seed).normal(size=(L, CFG.d_in))


def _record(seed, m=3):
    rng = np.random.default_rng(seed)
    L = 2 * m - 1
    tables = tuple(sorted(rng.choice(CFG.n_max, m, replace=False).tolist()))
    return TrainRecord("d", rng.normal(size=(L, CFG.d_in)), rng.normal(size=L), rng.normal(size=L),
                       tuple(rng.permutation(tables).tolist()), tables, ~np.eye(m, dtype=bool))


@pytest.fixture(scope="module")
def model():
    return MTModel(CFG)


def test_shared_encoder_preserves_length(model):
    for L in (1, 3, 7):
        assert model.encode_one(_x(0, L)).shape == (1, L, CFG.d_m)
    with pytest.raises(CapacityError):
        model.encode_one(_x(0, CFG.max_len + 1))


def test_shared_encoder_is_deterministic_and_position_sensitive(model):
    x = _x(1)
    a, b = model.encode_one(x).data, model.encode_one(x).data
    assert np.array_equal(a, b)
    # swap two nodes' content while their tree positions (trailing columns) stay put
    d_pos = 2 * (CFG.m_max - 1)
    swapped = x.copy()
    swapped[[0, 1], :-d_pos] = x[[1, 0], :-d_pos]
    out = model.encode_one(swapped).data
    assert not np.allclose(out[0, [1, 0]], a[0, [0, 1]])


def test_heads_are_finite_per_node(model):
    S = model.encode_one(_x(2))
    for head in (model.predict_card, model.predict_cost):
        y = head(S).data
        assert y.shape == (1, 5) and np.isfinite(y).all()


def test_heads_standardization():
    cfg = ModelConfig(**{**CFG.__dict__, "card_mu": 5.0, "card_sigma": 2.0})
    raw, scaled = MTModel(CFG), MTModel(cfg)
    S = raw.encode_one(_x(2))
    np.testing.assert_allclose(scaled.predict_card(S).data, 2.0 * raw.predict_card(S).data + 5.0)


def test_gradients_reach_shared_encoder(model):
    batch = collate([_record(0), _record(1)], CFG)
    model.zero_grad()
    _, card, cost, _, _ = model.forward(batch)
    T.tsum(T.add(card, cost)).backward()
    grads = [p.grad for name, p in model.named_parameters().items() if name.startswith("shared.")]
    assert grads and all(g is not None for g in grads)
    assert sum(np.abs(g).sum() for g in grads) > 0
    model.zero_grad()


def test_decode_step_is_a_distribution(model):
    S = model.encode_one(_x(3))
    for prefix in ([], [2], [2, 5]):
        p = model.decode_step(S, prefix)
        assert p.shape == (CFG.n_max,) and (p > 0).all()
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.array_equal(p, model.decode_step(S, prefix))


def test_teacher_forcing_uses_ground_truth(model):
    rec = _record(4)
    batch = collate([rec], CFG)
    with T.no_grad():
        _, _, _, logp, _ = model.forward(batch)
        S = model.encode_one(rec.x)
    touched = np.zeros(CFG.n_max, dtype=bool)
    touched[list(rec.tables)] = True
    for t in range(rec.m):
        step = model.decode_step(S, rec.order[:t], touched)
        np.testing.assert_allclose(np.exp(logp.data[0, t]), step, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 2))
def test_causality(seed, t):
    model = MTModel(CFG)
    rng = np.random.default_rng(seed)
    S = model.encode_one(_x(seed))
    a = rng.choice(CFG.n_max, 3, replace=False)
    b = a.copy()
    b[t] = (set(range(CFG.n_max)) - set(a.tolist())).pop()
    with T.no_grad():
        la = model.decode_logprobs(S, None, a[None]).data
        lb = model.decode_logprobs(S, None, b[None]).data
    np.testing.assert_array_equal(la[0, :t + 1], lb[0, :t + 1])
    assert not np.array_equal(la[0, t + 1:], lb[0, t + 1:])


def test_untouched_and_chosen_slots_are_suppressed(model):
    S = model.encode_one(_x(5))
    touched = np.zeros(CFG.n_max, dtype=bool)
    touched[[1, 4, 6]] = True
    p = model.decode_step(S, [4], touched)
    assert p[[1, 6]].sum() > 0.99
    assert p[4] < 1e-9


def test_sequence_probability(model):
    x = _x(6, 1)
    S = model.encode_one(x)
    p1 = model.decode_step(S, [], np.isin(np.arange(CFG.n_max), [3]))
    assert sequence_probability(model, x, [3]) == pytest.approx(p1[3], rel=1e-12)
    total = sum(sequence_probability(model, x, [s], range(CFG.n_max)) for s in range(CFG.n_max))
    assert total <= 1 + 1e-9
    order = [2, 0, 5]
    x = _x(7)
    S = model.encode_one(x)
    terms = [math.log(model.decode_step(S, order[:t], np.isin(np.arange(CFG.n_max), order))[order[t]])
             for t in range(3)]
    assert math.log(sequence_probability(model, x, order)) == pytest.approx(sum(terms), abs=1e-12)


def test_sequence_logprob_is_differentiable(model):
    S = T.Tensor(model.encode_one(_x(8)).data, requires_grad=True)
    lp = model.sequence_logprob(S, [[1, 2, 3], [3, 2, 1]], [1, 2, 3])
    assert lp.shape == (2,)
    T.tsum(lp).backward()
    assert np.abs(S.grad).sum() > 0


def test_checkpoint_roundtrip(tmp_path, model):
    model.save(tmp_path / "m.mtck", {"note": "x"})
    back, meta = load_model(tmp_path / "m.mtck")
    assert meta["note"] == "x" and back.cfg == model.cfg
    batch = collate([_record(9), _record(10, 2)], CFG)
    with T.no_grad():
        out_a, out_b = model.forward(batch), back.forward(batch)
    for a, b in zip(out_a[:4], out_b[:4]):
        assert np.array_equal(a.data, b.data)


def test_bushy_position_head():
    cfg = ModelConfig(**{**CFG.__dict__, "bushy": True})
    model = MTModel(cfg)
    S = model.encode_one(_x(11))
    lp = model.position_logprobs(S, None, np.array([[1, 2]]))
    assert lp.shape == (1, 3, 1 << (cfg.m_max - 1))
    np.testing.assert_allclose(np.exp(lp.data).sum(-1), 1.0)
    with pytest.raises(RuntimeError):
        MTModel(CFG).position_logprobs(S, None, np.array([[1]]))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"d_in": 3, "width": 9})
    with pytest.raises(ValueError):
        MTModel(ModelConfig(d_in=4, d_m=10, n_heads=4))
