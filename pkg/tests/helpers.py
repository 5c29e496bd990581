"""Independent reference implementations used only by the tests.

None of these share code paths with the package's own oracles: cardinality
is counted by nested loops over rows, optimal orders by enumerating every
permutation, gradients by central differences.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np

from mtmlf.schema_gen import GenConfig, generate_database
from mtmlf.workload import Scan, preorder

TINY = GenConfig(n_tables=(4, 5), rows=(20, 60), n_columns=(1, 3), domain=(2, 12))
SMALL = GenConfig(n_tables=(6, 6), rows=(200, 400), n_columns=(2, 4), domain=(2, 50))


def tiny_db(seed: int, cfg: GenConfig = TINY):
    return generate_database(seed, cfg)


def _row_ok(db, table, filters, r):
    for p in filters:
        v = int(db.column(table, p.column)[r])
        a = p.values
        if p.op == "eq" and v != a[0]:
            return False
        if p.op == "lt" and not v < a[0]:
            return False
        if p.op == "gt" and not v > a[0]:
            return False
        if p.op == "range" and not a[0] <= v <= a[1]:
            return False
    return True


def key_classes(query):
    """Column groups the query equates, directly or through a chain of predicates."""
    groups: list[set] = []
    for j in query.joins:
        a, b = (j.left_table, j.left_column), (j.right_table, j.right_column)
        hit = [g for g in groups if a in g or b in g]
        merged = {a, b}.union(*hit) if hit else {a, b}
        groups = [g for g in groups if g not in hit] + [merged]
    return groups


def nested_loop_count(db, query, tables=None) -> int:
    """Count joined tuples by extending partial tuples one table at a time.

    Every pair of columns in the same key class must agree on each tuple.
    """
    tables = list(query.tables if tables is None else tables)
    classes = key_classes(query)
    rows = {t: [r for r in range(db.rows(t)) if _row_ok(db, t, query.filters_on(t), r)] for t in tables}
    checks = []  # (i, col_i, j, col_j) for i < j in ``tables`` order
    for g in classes:
        members = [(t, c) for (t, c) in g if t in tables]
        for (ta, ca), (tb, cb) in itertools.combinations(members, 2):
            ia, ib = tables.index(ta), tables.index(tb)
            if ia > ib:
                ia, ca, ib, cb = ib, cb, ia, ca
            checks.append((ia, ca, ib, cb))
    partial = [()]
    for k, t in enumerate(tables):
        mine = [c for c in checks if c[2] == k]
        nxt = []
        for tup in partial:
            for r in rows[t]:
                if all(db.column(tables[i], ci)[tup[i]] == db.column(t, cj)[r] for i, ci, _, cj in mine):
                    nxt.append(tup + (r,))
        partial = nxt
    return len(partial)


def is_legal(order, query) -> bool:
    """Every prefix of ``order`` must be connected by the query's join predicates."""
    edges = {frozenset((j.left_table, j.right_table)) for j in query.joins}
    if sorted(order) != sorted(query.tables):
        return False
    seen = {order[0]}
    for t in order[1:]:
        if not any(frozenset((t, s)) in edges for s in seen):
            return False
        seen.add(t)
    return True


def hash_join_cost(left, right, out, p):
    small, large = min(left, right), max(left, right)
    return Fraction(p.c_hash_build) * small + Fraction(p.c_hash_probe) * large + Fraction(p.c_output) * out


def scan_cost(scan: Scan, out, p):
    if scan.kind == "seq":
        return Fraction(p.c_seqscan) * scan.rows
    return Fraction(p.c_idxscan) * out


def exact_left_deep_cost(item, perm, params) -> Fraction:
    """Exact hash-join cost of one left-deep order from the item's subset cardinalities."""
    q = item.query
    cards = item.subset_cards
    scans = {n.table: n for n in preorder(item.plan) if isinstance(n, Scan)}
    total = sum((scan_cost(scans[t], Fraction(cards[q.mask_of([t])]), params) for t in perm), Fraction(0))
    for k in range(1, len(perm)):
        left = Fraction(cards[q.mask_of(perm[:k])])
        right = Fraction(cards[q.mask_of([perm[k]])])
        out = Fraction(cards[q.mask_of(perm[:k + 1])])
        total += hash_join_cost(left, right, out, params)
    return total


def exhaustive_left_deep(item, params):
    """Minimum cost over every legal permutation."""
    best = None
    for perm in itertools.permutations(item.query.tables):
        if not is_legal(perm, item.query):
            continue
        total = exact_left_deep_cost(item, perm, params)
        if best is None or total < best[0]:
            best = (total, perm)
    return best


def finite_diff_check(fn, inputs, h=1e-5, rng=None, n_probe=None, floor=1e-3):
    """Max relative error between autodiff and central differences.

    ``fn`` maps a list of Tensors to a Tensor; the scalar checked is
    sum(out * w) for a fixed random weight w. Errors are relative to the
    larger gradient magnitude, floored at ``floor`` so that near-zero entries
    are compared absolutely.
    """
    from mtmlf.tensor import Tensor, tsum, mul

    rng = rng or np.random.default_rng(0)
    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(ts)
    w = rng.normal(size=out.shape)
    loss = tsum(mul(out, w))
    loss.backward()
    worst = 0.0
    for k, (t, x) in enumerate(zip(ts, inputs)):
        idx = list(np.ndindex(x.shape))
        if n_probe is not None and len(idx) > n_probe:
            idx = [idx[i] for i in rng.choice(len(idx), n_probe, replace=False)]
        for ix in idx:
            xp, xm = [a.copy() for a in inputs], [a.copy() for a in inputs]
            xp[k][ix] += h
            xm[k][ix] -= h
            fp = float((fn([Tensor(a) for a in xp]).data * w).sum())
            fm = float((fn([Tensor(a) for a in xm]).data * w).sum())
            num = (fp - fm) / (2 * h)
            ana = float(t.grad[ix]) if t.grad is not None else 0.0
            err = abs(num - ana) / max(floor, abs(num), abs(ana))
            worst = max(worst, err)
    return worst


def random_tree(rng, m, left_deep=False):
    """Random binary join tree over tables T1..Tm with depth <= m - 1."""
    names = [f"T{i + 1}" for i in range(m)]
    rng.shuffle(names)
    if left_deep:
        tree = names[0]
        for n in names[1:]:
            tree = (tree, n)
        return tree

    def build(leaves):
        if len(leaves) == 1:
            return leaves[0]
        cut = int(rng.integers(1, len(leaves)))
        return (build(leaves[:cut]), build(leaves[cut:]))

    return build(names)


# ---------------------------------------------------------------------------
# gradient-check cases: name -> (fn(list[Tensor]) -> Tensor, make_inputs(rng))


def _away(x, point=0.0, gap=0.1):
    """Push values at least ``gap`` from a kink at ``point``."""
    d = x - point
    return point + np.sign(d + (d == 0)) * (np.abs(d) + gap)


def _shape(rng, ndim=None):
    ndim = ndim or int(rng.integers(1, 4))
    return tuple(int(rng.integers(1, 4)) for _ in range(ndim))


def _grad_cases():
    from mtmlf import tensor as T

    def n(rng, shape):
        return rng.normal(size=shape)

    def mm2(rng):
        a, b, c = (int(rng.integers(1, 4)) for _ in range(3))
        return [n(rng, (a, b)), n(rng, (b, c))]

    def mm3(rng):
        B, a, b, c = (int(rng.integers(1, 4)) for _ in range(4))
        return [n(rng, (B, a, b)), n(rng, (b, c)) if rng.random() < 0.5 else n(rng, (B, b, c))]

    def same2(rng):
        s = _shape(rng)
        return [n(rng, s), n(rng, s)]

    def bcast(rng):
        s = _shape(rng, 3)
        return [n(rng, s), n(rng, s[-1:])]

    def ln(rng):
        s = _shape(rng)
        s = s[:-1] + (max(2, s[-1]),)
        return [n(rng, s), n(rng, s[-1:]), n(rng, s[-1:])]

    def concat_in(rng):
        s = _shape(rng, 2)
        return [n(rng, s), n(rng, (s[0], int(rng.integers(1, 4))))]

    def emb(rng):
        return [n(rng, (5, int(rng.integers(1, 4))))]

    def ce_target(shape):
        t = np.arange(1.0, 1.0 + np.prod(shape)).reshape(shape)
        return t / t.sum(axis=-1, keepdims=True)

    ids = np.array([[0, 3, 3], [4, 1, 0]])
    return {
        "add": (lambda t: T.add(t[0], t[1]), same2),
        "add_broadcast": (lambda t: T.add(t[0], t[1]), bcast),
        "neg": (lambda t: T.neg(t[0]), lambda r: [n(r, _shape(r))]),
        "mul": (lambda t: T.mul(t[0], t[1]), same2),
        "mul_broadcast": (lambda t: T.mul(t[0], t[1]), bcast),
        "matmul_2d": (lambda t: T.matmul(t[0], t[1]), mm2),
        "matmul_3d": (lambda t: T.matmul(t[0], t[1]), mm3),
        "transpose": (lambda t: T.transpose(t[0]), lambda r: [n(r, _shape(r, 3))]),
        "reshape": (lambda t: T.reshape(t[0], (-1,)), lambda r: [n(r, _shape(r))]),
        "getitem": (lambda t: T.getitem(t[0], (slice(None), 0)), lambda r: [n(r, _shape(r, 2))]),
        "slice_last": (lambda t: T.slice_last(t[0], 0, max(1, t[0].shape[-1] - 1)),
                       lambda r: [n(r, _shape(r))]),
        "concat": (lambda t: T.concat([t[0], t[1]], axis=-1), concat_in),
        "sum": (lambda t: T.tsum(t[0], axis=-1), lambda r: [n(r, _shape(r))]),
        "mean": (lambda t: T.mean(t[0], axis=0), lambda r: [n(r, _shape(r))]),
        "exp": (lambda t: T.exp(t[0]), lambda r: [n(r, _shape(r))]),
        "log": (lambda t: T.log(t[0]), lambda r: [r.uniform(0.5, 3.0, _shape(r))]),
        "abs": (lambda t: T.tabs(t[0]), lambda r: [_away(n(r, _shape(r)))]),
        "relu": (lambda t: T.relu(t[0]), lambda r: [_away(n(r, _shape(r)))]),
        "clamp_min": (lambda t: T.clamp_min(t[0], -0.5), lambda r: [_away(n(r, _shape(r)), -0.5)]),
        "softmax": (lambda t: T.softmax(t[0], axis=-1), lambda r: [n(r, _shape(r))]),
        "log_softmax": (lambda t: T.log_softmax(t[0], axis=-1), lambda r: [n(r, _shape(r))]),
        "logsumexp": (lambda t: T.logsumexp(t[0], axis=-1), lambda r: [n(r, _shape(r))]),
        "layer_norm": (lambda t: T.layer_norm(t[0], t[1], t[2]), ln),
        "embedding_lookup": (lambda t: T.embedding_lookup(t[0], ids), emb),
        "cross_entropy": (lambda t: T.cross_entropy(t[0], ce_target(t[0].shape)),
                          lambda r: [n(r, _shape(r, 2))]),
    }


GRAD_CASES = _grad_cases()


def grad_check_op(name, n_cases=100, seed=0):
    fn, make = GRAD_CASES[name]
    rng = np.random.default_rng(seed)
    return max(finite_diff_check(fn, make(rng), rng=rng) for _ in range(n_cases))
