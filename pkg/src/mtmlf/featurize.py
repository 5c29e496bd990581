"""Plan featurization: predicate tokens, per-table filter encoders, node
embeddings, tree-positional serialization, and leaf-occupancy decoding
embeddings with exact tree reversion.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .nn import Linear, Module, TransformerEncoder
from .oracle import CapacityError
from .schema_gen import ConfigError, Database, TableSpec
from .tensor import Tensor
from .workload import (
    Join, PlanNode, Predicate, Query, Scan, WorkloadItem, leaves, preorder_paths, tree_shape,
)

PRED_OPS = ("eq", "lt", "gt", "range", "<empty>")
NODE_OPS = ("seq", "index", "hash", "nestedloop", "merge")
SENTINEL_OP = PRED_OPS.index("<empty>")


class VocabularyError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class MalformedEmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    """Dimensions fixed across every database of a meta-training run."""

    n_max: int = 16
    c_max: int = 20
    d_v: int = 8
    d_s: int = 32
    enc_blocks: int = 3
    enc_heads: int = 4
    m_max: int = 8
    numeric_bins: int = 64

    @property
    def o_max(self) -> int:
        return len(NODE_OPS)

    @property
    def d_node(self) -> int:
        return self.n_max + self.o_max + self.d_s

    @property
    def d_pos(self) -> int:
        return 2 * (self.m_max - 1)

    @property
    def d_in(self) -> int:
        return self.d_node + self.d_pos

    @property
    def token_dim(self) -> int:
        return self.c_max + len(PRED_OPS) + 2 * self.d_v


# ---------------------------------------------------------------------------
# predicate tokens


@dataclass(frozen=True)
class Token:
    column: int  # -1 for the empty-filter sentinel
    op: int
    values: tuple[int, ...]  # embedding rows within the column's table


def value_rows(spec: TableSpec, column: str, cfg: FeatureConfig) -> int:
    col = spec.column(column)
    if col.kind == "numeric":
        return min(col.domain_size, cfg.numeric_bins)
    return col.domain_size


def value_row(spec: TableSpec, column: str, value: int, cfg: FeatureConfig) -> int:
    col = spec.column(column)
    if not 0 <= value < col.domain_size:
        raise VocabularyError(f"{spec.name}.{column}: value {value} outside [0, {col.domain_size})")
    if col.kind == "numeric":
        bins = value_rows(spec, column, cfg)
        return value * bins // col.domain_size
    return value


def featurize_predicate(preds: Iterable[Predicate], spec: TableSpec, cfg: FeatureConfig) -> list[Token]:
    preds = list(preds)
    if not preds:
        return [Token(-1, SENTINEL_OP, ())]
    names = spec.attribute_names
    if len(names) > cfg.c_max:
        raise CapacityError(f"{spec.name} has more than c_max={cfg.c_max} columns")
    out = []
    for p in preds:
        if p.column not in names:
            raise VocabularyError(f"{spec.name} has no column {p.column!r}")
        rows = tuple(value_row(spec, p.column, v, cfg) for v in p.values)
        out.append(Token(names.index(p.column), PRED_OPS.index(p.op), rows))
    return out


class SingleTableEncoder(Module):
    """Transformer over a table's filter tokens, mean-pooled to ``d_s``.

    The auxiliary head predicts log-cardinality and exists only to train
    the encoder.
    """

    def __init__(self, spec: TableSpec, cfg: FeatureConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.table = spec.name
        self.cfg = cfg
        self.offsets: dict[str, int] = {}
        total = 0
        for c in spec.columns:
            self.offsets[c.name] = total
            total += value_rows(spec, c.name, cfg)
        self.null_row = total
        self.values = Tensor(rng.normal(0, 0.5, size=(total + 1, cfg.d_v)), requires_grad=True)
        self.inp = Linear(rng, cfg.token_dim, cfg.d_s)
        self.encoder = TransformerEncoder(rng, cfg.d_s, cfg.enc_heads, cfg.enc_blocks)
        self.out = Linear(rng, cfg.d_s, cfg.d_s)
        self.aux = Linear(rng, cfg.d_s, 1)
        self.spec = spec

    def tokens(self, preds: Iterable[Predicate]) -> list[Token]:
        return featurize_predicate(preds, self.spec, self.cfg)

    def _inputs(self, batch: list[list[Token]]):
        cfg = self.cfg
        B = len(batch)
        L = max(len(toks) for toks in batch)
        onehot = np.zeros((B, L, cfg.c_max + len(PRED_OPS)))
        ids = np.full((B, L, 2), self.null_row, dtype=np.int64)
        valid = np.zeros((B, L), dtype=bool)
        names = self.spec.attribute_names
        for b, toks in enumerate(batch):
            for i, tok in enumerate(toks):
                valid[b, i] = True
                onehot[b, i, cfg.c_max + tok.op] = 1.0
                if tok.column >= 0:
                    onehot[b, i, tok.column] = 1.0
                    base = self.offsets[names[tok.column]]
                    for j, r in enumerate(tok.values):
                        ids[b, i, j] = base + r
        return onehot, ids, valid

    def __call__(self, batch: list[list[Token]]) -> tuple[Tensor, Tensor]:
        onehot, ids, valid = self._inputs(batch)
        B, L = valid.shape
        present = (ids != self.null_row).astype(np.float64)
        v1 = T.mul(T.embedding_lookup(self.values, ids[:, :, 0]), present[:, :, 0:1])
        v2 = T.mul(T.embedding_lookup(self.values, ids[:, :, 1]), present[:, :, 1:2])
        x = self.inp(T.concat([Tensor(onehot), v1, v2], axis=-1))
        h = self.encoder(x, valid)
        w = (valid / valid.sum(axis=1, keepdims=True))[:, None, :]
        pooled = T.reshape(T.matmul(Tensor(w), h), (B, self.cfg.d_s))
        emb = self.out(pooled)
        pred = T.reshape(self.aux(T.relu(emb)), (B,))
        return emb, pred

    def embed(self, preds_batch: list[Iterable[Predicate]]) -> np.ndarray:
        with T.no_grad():
            emb, _ = self([self.tokens(p) for p in preds_batch])
        return emb.data

    def predict_log_card(self, preds_batch: list[Iterable[Predicate]]) -> np.ndarray:
        with T.no_grad():
            _, pred = self([self.tokens(p) for p in preds_batch])
        return pred.data


@dataclass
class EncoderTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def log_card(x: float) -> float:
    return math.log(max(float(x), 1.0))


def train_single_table_encoder(db: Database, table: str, queries: list[Query],
                               cfg: FeatureConfig | None = None,
                               train_cfg: EncoderTrainConfig | None = None,
                               cards: list[float] | None = None):
    """Fit one table's encoder on single-table queries with a log-space
    Q-error loss. Returns ``(encoder, per-epoch mean loss)``."""
    from .oracle import true_cardinality

    cfg = cfg or FeatureConfig()
    train_cfg = train_cfg or EncoderTrainConfig()
    if not queries:
        raise ConfigError(f"no training queries for table {table}")
    spec = db.schema.table(table)
    if cards is None:
        cards = [true_cardinality(db, q) for q in queries]
    targets = np.array([log_card(c) for c in cards])
    enc = SingleTableEncoder(spec, cfg, seed=train_cfg.seed + 7919 * db.schema.table_index(table))
    enc.aux.b.data[:] = targets.mean()
    tokens = [enc.tokens(q.filters_on(table)) for q in queries]
    params = enc.named_parameters()
    state = T.AdamState(lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    history = []
    for _ in range(train_cfg.epochs):
        perm = rng.permutation(len(queries))
        total = 0.0
        for s in range(0, len(perm), train_cfg.batch_size):
            idx = perm[s:s + train_cfg.batch_size]
            _, pred = enc([tokens[i] for i in idx])
            loss = T.mean(T.tabs(T.add(pred, -targets[idx])))
            enc.zero_grad()
            loss.backward()
            T.adam_step(params, state)
            total += loss.item() * len(idx)
        history.append(total / len(queries))
    return enc, history


def save_encoders(path, encoders: dict[str, dict[str, SingleTableEncoder]], cfg: FeatureConfig) -> None:
    """Encoders of several databases in one checkpoint, namespaced ``db/table/param``."""
    params = {}
    for db_name in sorted(encoders):
        for table in sorted(encoders[db_name]):
            for k, v in encoders[db_name][table].state_dict().items():
                params[f"{db_name}/{table}/{k}"] = v
    meta = {"kind": "encoders", "feature_config": asdict(cfg),
            "tables": {d: sorted(e) for d, e in sorted(encoders.items())}}
    T.save_checkpoint(path, params, meta)


def load_encoders(path, dbs: dict[str, Database]) -> tuple[dict[str, dict[str, SingleTableEncoder]], FeatureConfig]:
    params, meta = T.load_checkpoint(path)
    cfg = FeatureConfig(**meta["feature_config"])
    out: dict[str, dict[str, SingleTableEncoder]] = {}
    for db_name, tables in meta["tables"].items():
        if db_name not in dbs:
            continue
        out[db_name] = {}
        for table in tables:
            enc = SingleTableEncoder(dbs[db_name].schema.table(table), cfg)
            prefix = f"{db_name}/{table}/"
            enc.load_state_dict({k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)})
            out[db_name][table] = enc
    return out, cfg


# ---------------------------------------------------------------------------
# plan sequence


@dataclass
class PlanSequence:
    nodes: list[PlanNode]
    paths: list[str]
    positions: np.ndarray  # (L, d_pos)

    def __len__(self) -> int:
        return len(self.nodes)


def position_vector(path: str, m_max: int) -> np.ndarray:
    """Stacked one-hot steps (left/right) from the root; zero beyond the depth."""
    depth = m_max - 1
    if len(path) > depth:
        raise CapacityError(f"tree depth {len(path)} exceeds {depth}")
    v = np.zeros(2 * depth)
    for k, step in enumerate(path):
        v[2 * k + (0 if step == "L" else 1)] = 1.0
    return v


def serialize_plan(plan: PlanNode, m_max: int = 8) -> PlanSequence:
    pairs = preorder_paths(plan)
    nodes = [n for n, _ in pairs]
    paths = [p for _, p in pairs]
    pos = np.stack([position_vector(p, m_max) for p in paths])
    return PlanSequence(nodes, paths, pos)


def table_slot(db: Database, table: str, cfg: FeatureConfig) -> int:
    i = db.schema.table_index(table)
    if i >= cfg.n_max:
        raise CapacityError(f"table index {i} exceeds n_max={cfg.n_max}")
    return i


def join_predicate_embedding(node: Join, query: Query, db: Database, cfg: FeatureConfig) -> np.ndarray:
    left, right = set(leaves(node.left)), set(leaves(node.right))
    v = np.zeros(cfg.d_s)
    for jp in query.joins:
        a, b = jp.left_table, jp.right_table
        if (a in left and b in right) or (a in right and b in left):
            v[0 if jp.kind == "PK-FK" else 1] += 1.0
            v[2 + table_slot(db, jp.fact, cfg)] += 1.0
    return v


def embed_node(node: PlanNode, query: Query, db: Database,
               encoders: dict[str, SingleTableEncoder], cfg: FeatureConfig,
               scan_embedding: np.ndarray | None = None) -> np.ndarray:
    """Table multi-hot, operator one-hot, then the filter encoding (scans)
    or join-predicate summary (joins); padded with zeros to ``d_node``."""
    v = np.zeros(cfg.d_node)
    for t in leaves(node):
        v[table_slot(db, t, cfg)] = 1.0
    v[cfg.n_max + NODE_OPS.index(node.kind)] = 1.0
    lo = cfg.n_max + cfg.o_max
    if isinstance(node, Scan):
        if scan_embedding is None:
            if node.table not in encoders:
                raise StateError(f"no trained encoder for table {node.table}")
            scan_embedding = encoders[node.table].embed([node.filters])[0]
        v[lo:lo + cfg.d_s] = scan_embedding
    else:
        v[lo:lo + cfg.d_s] = join_predicate_embedding(node, query, db, cfg)
    return v


def featurize_plan(plan: PlanNode, query: Query, db: Database,
                   encoders: dict[str, SingleTableEncoder], cfg: FeatureConfig,
                   scan_cache: dict | None = None) -> np.ndarray:
    """``E(P)`` as an (L, d_node + d_pos) array, pre-order."""
    seq = serialize_plan(plan, cfg.m_max)
    rows = []
    for node, pos in zip(seq.nodes, seq.positions):
        emb = None
        if isinstance(node, Scan) and scan_cache is not None:
            emb = scan_cache.get((node.table, node.filters))
        rows.append(np.concatenate([embed_node(node, query, db, encoders, cfg, emb), pos]))
    return np.stack(rows)


def scan_embeddings(items: Iterable[WorkloadItem], encoders: dict[str, SingleTableEncoder]) -> dict:
    """Batch-encode every distinct (table, filter) scan of a workload."""
    by_table: dict[str, list] = {}
    for it in items:
        for node, _ in preorder_paths(it.plan):
            if isinstance(node, Scan):
                by_table.setdefault(node.table, [])
                if node.filters not in by_table[node.table]:
                    by_table[node.table].append(node.filters)
    cache = {}
    for table, filters in by_table.items():
        if table not in encoders:
            raise StateError(f"no trained encoder for table {table}")
        for s in range(0, len(filters), 256):
            chunk = filters[s:s + 256]
            embs = encoders[table].embed(chunk)
            for f, e in zip(chunk, embs):
                cache[(table, f)] = e
    return cache


# ---------------------------------------------------------------------------
# decoding embeddings


def tree_depth(shape) -> int:
    if isinstance(shape, str):
        return 0
    return 1 + max(tree_depth(shape[0]), tree_depth(shape[1]))


def tree_leaves(shape) -> tuple[str, ...]:
    if isinstance(shape, str):
        return (shape,)
    return tree_leaves(shape[0]) + tree_leaves(shape[1])


def decoding_embeddings(tree, m_max: int = 8) -> dict[str, np.ndarray]:
    """Leaf-occupancy masks of the tree completed to depth ``m_max - 1``.

    ``tree`` is a nested-tuple join shape (or a plan node). Every leaf of
    the completed tree inherits the table of its nearest original leaf.
    """
    if not isinstance(tree, (str, tuple)):
        tree = tree_shape(tree)
    depth = m_max - 1
    if tree_depth(tree) > depth:
        raise CapacityError(f"tree does not fit a complete binary tree of depth {depth}")
    width = 1 << depth
    masks: dict[str, np.ndarray] = {}

    def fill(node, lo, hi):
        if isinstance(node, str):
            if node in masks:
                raise MalformedEmbeddingError(f"table {node} appears twice")
            m = np.zeros(width, dtype=np.int64)
            m[lo:hi] = 1
            masks[node] = m
            return
        mid = (lo + hi) // 2
        fill(node[0], lo, mid)
        fill(node[1], mid, hi)

    fill(tree, 0, width)
    return masks


def tree_from_embeddings(masks: dict[str, np.ndarray]):
    """Rebuild the unique join shape whose decoding embeddings are ``masks``."""
    if not masks:
        raise MalformedEmbeddingError("no embeddings")
    arrs = {t: np.asarray(m) for t, m in masks.items()}
    width = {a.shape for a in arrs.values()}
    if len(width) != 1 or len(next(iter(width))) != 1:
        raise MalformedEmbeddingError("embeddings must be equal-length vectors")
    n = next(iter(width))[0]
    if n & (n - 1):
        raise MalformedEmbeddingError("embedding length must be a power of two")
    labels = np.full(n, -1)
    names = sorted(arrs)
    for k, t in enumerate(names):
        a = arrs[t]
        if not np.isin(a, (0, 1)).all():
            raise MalformedEmbeddingError(f"{t}: entries must be 0/1")
        idx = np.flatnonzero(a)
        if idx.size == 0:
            raise MalformedEmbeddingError(f"{t}: empty mask")
        size, start = idx.size, idx[0]
        if size & (size - 1) or start % size or idx[-1] != start + size - 1:
            raise MalformedEmbeddingError(f"{t}: support is not an aligned dyadic block")
        if (labels[idx] != -1).any():
            raise MalformedEmbeddingError(f"{t}: overlaps another table")
        labels[idx] = k
    if (labels == -1).any():
        raise MalformedEmbeddingError("masks do not cover every leaf")

    def build(lo, hi):
        seg = labels[lo:hi]
        if (seg == seg[0]).all():
            return names[seg[0]]
        mid = (lo + hi) // 2
        return (build(lo, mid), build(mid, hi))

    return build(0, n)


def kl_targets(tree, order: Iterable[str], m_max: int = 8) -> np.ndarray:
    """Normalized decoding embeddings stacked in ``order`` (one row per step)."""
    masks = decoding_embeddings(tree, m_max)
    rows = [masks[t] / masks[t].sum() for t in order]
    return np.stack(rows).astype(np.float64)


# ---------------------------------------------------------------------------
# training records


@dataclass
class TrainRecord:
    db: str
    x: np.ndarray  # (L, d_in)
    card: np.ndarray  # (L,) log-cardinality per node
    cost: np.ndarray  # (L,) log-cost per node
    order: tuple[int, ...]  # optimal order as table slots
    tables: tuple[int, ...]  # touched table slots, query order
    adjacency: np.ndarray  # (m, m) over ``tables``
    item: Optional[WorkloadItem] = None
    positions: Optional[np.ndarray] = None  # (m, 2**(m_max-1)) KL targets, bushy mode

    @property
    def m(self) -> int:
        return len(self.tables)


def build_records(db: Database, items: list[WorkloadItem], encoders: dict[str, SingleTableEncoder],
                  cfg: FeatureConfig, bushy: bool = False) -> list[TrainRecord]:
    from .schema_gen import adjacency_matrix

    cache = scan_embeddings(items, encoders)
    out = []
    for it in items:
        if not it.labeled:
            raise StateError("workload item is not labeled")
        x = featurize_plan(it.plan, it.query, db, encoders, cfg, cache)
        slots = tuple(table_slot(db, t, cfg) for t in it.query.tables)
        rec = TrainRecord(
            db=db.name, x=x,
            card=np.array([log_card(c) for c in it.card]),
            cost=np.array([log_card(c) for c in it.cost]),
            order=tuple(table_slot(db, t, cfg) for t in it.optimal_order),
            tables=slots, adjacency=adjacency_matrix(db.schema, it.query), item=it)
        if bushy and it.optimal_tree is not None:
            leaf_order = tree_leaves(it.optimal_tree)
            rec.order = tuple(table_slot(db, t, cfg) for t in leaf_order)
            rec.positions = kl_targets(it.optimal_tree, leaf_order, cfg.m_max)
        out.append(rec)
    return out
