"""Synthetic multi-table database generation.

Three stages: a join schema of fact and dimension tables (S1), attribute
columns with controllable skew/correlation (S2), and key columns where
foreign keys follow a designated attribute (S3). Everything is a pure
function of a 64-bit seed, and databases persist as a JSON schema
descriptor plus one little-endian columnar file per table.
"""

from __future__ import annotations

import json
import os
import struct
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .tensor import atomic_write_bytes

TABLE_MAGIC = b"MTDB1\x00"
SCHEMA_VERSION = 1
DOMAIN_CAP = 1000
PK_COLUMN = "id"


class ConfigError(ValueError):
    pass


class OrderingError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "categorical" | "numeric"
    domain_size: int
    skew: float = 0.0
    correlation_group: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("categorical", "numeric"):
            raise ConfigError(f"unknown column kind {self.kind!r}")
        if self.domain_size < 1:
            raise ConfigError("domain_size must be >= 1")
        if self.skew < 0:
            raise ConfigError("skew must be >= 0")


@dataclass(frozen=True)
class JoinRelation:
    child_table: str
    child_fk_column: str
    parent_table: str
    parent_pk_column: str = PK_COLUMN
    kind: str = "PK-FK"


@dataclass(frozen=True)
class JoinPredicate:
    """Equality ``left_table.left_column = right_table.right_column``."""

    left_table: str
    left_column: str
    right_table: str
    right_column: str
    kind: str = "PK-FK"
    fact: str = ""  # table whose primary key domain the join key ranges over

    def tables(self) -> tuple[str, str]:
        return self.left_table, self.right_table


@dataclass(frozen=True)
class TableSpec:
    name: str
    row_count: int
    columns: tuple[ColumnSpec, ...]
    pk_column: str = PK_COLUMN
    fk_columns: tuple[str, ...] = ()
    fk_attribute: Optional[str] = None
    bootstrap_from: Optional[str] = None
    bootstrap_columns: tuple[str, ...] = ()

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(f"{self.name} has no attribute column {name!r}")

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)


@dataclass(frozen=True)
class JoinSchema:
    tables: tuple[TableSpec, ...]
    fact_tables: tuple[str, ...]
    relations: tuple[JoinRelation, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tables)

    def table(self, name: str) -> TableSpec:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(f"unknown table {name!r}")

    def table_index(self, name: str) -> int:
        return self.names.index(name)

    def parents_of(self, name: str) -> list[str]:
        return [r.parent_table for r in self.relations if r.child_table == name]

    def join_edges(self) -> dict[frozenset, JoinPredicate]:
        """One join predicate per joinable table pair.

        PK-FK relations win; otherwise two tables referencing the same fact
        table join FK-FK through the lowest-indexed shared parent.
        """
        edges: dict[frozenset, JoinPredicate] = {}
        for r in self.relations:
            edges[frozenset((r.child_table, r.parent_table))] = JoinPredicate(
                r.child_table, r.child_fk_column, r.parent_table, r.parent_pk_column,
                "PK-FK", r.parent_table)
        for parent in self.names:
            kids = [r for r in self.relations if r.parent_table == parent]
            for i in range(len(kids)):
                for j in range(i + 1, len(kids)):
                    a, b = kids[i], kids[j]
                    key = frozenset((a.child_table, b.child_table))
                    if key in edges:
                        continue
                    edges[key] = JoinPredicate(a.child_table, a.child_fk_column,
                                               b.child_table, b.child_fk_column, "FK-FK", parent)
        return edges

    def neighbors(self) -> dict[str, set[str]]:
        nb: dict[str, set[str]] = {n: set() for n in self.names}
        for pair in self.join_edges():
            a, b = tuple(pair)
            nb[a].add(b)
            nb[b].add(a)
        return nb

    def is_connected(self) -> bool:
        nb = self.neighbors()
        start = self.names[0]
        seen = {start}
        queue = deque([start])
        while queue:
            for nxt in nb[queue.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return len(seen) == len(self.names)


@dataclass
class GenConfig:
    n_tables: tuple[int, int] = (6, 11)
    n_fact: tuple[int, int] = (2, 3)
    rows: tuple[int, int] = (1000, 10000)
    n_columns: tuple[int, int] = (2, 8)
    domain: tuple[int, int] = (2, DOMAIN_CAP)
    skew: tuple[float, float] = (0.0, 2.0)
    numeric_fraction: float = 0.5
    correlation_prob: float = 0.5
    correlation_strength: float = 0.7
    fk_conditioning: bool = True
    fk_correlation: float = 0.8
    fk_skew: float = 1.0
    bootstrap_prob: float = 0.0

    def validate(self) -> None:
        for name in ("n_tables", "n_fact", "rows", "n_columns", "domain", "skew"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range [{lo}, {hi}]")
        if self.n_tables[0] < 3:
            raise ConfigError("need at least 3 tables (2 fact + 1 dimension)")
        if self.n_fact[0] < 2 or self.n_fact[1] > 3:
            raise ConfigError("fact table count must lie in [2, 3]")
        if self.rows[0] < 1 or self.n_columns[0] < 1 or self.domain[0] < 1:
            raise ConfigError("row, column and domain ranges must be positive")
        if self.domain[1] > DOMAIN_CAP:
            raise ConfigError(f"domain sizes are capped at {DOMAIN_CAP}")
        for name in ("numeric_fraction", "correlation_prob", "correlation_strength",
                     "fk_correlation", "bootstrap_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generation keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class Database:
    schema: JoinSchema
    data: dict[str, dict[str, np.ndarray]]
    seed: int
    name: str = "db"

    def rows(self, table: str) -> int:
        return self.schema.table(table).row_count

    def column(self, table: str, column: str) -> np.ndarray:
        return self.data[table][column]


# ---------------------------------------------------------------------------
# S1


def gen_join_schema(seed: int, cfg: GenConfig | None = None) -> JoinSchema:
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.default_rng([seed, 1])
    n = int(rng.integers(cfg.n_tables[0], cfg.n_tables[1] + 1))
    n_fact = int(rng.integers(cfg.n_fact[0], min(cfg.n_fact[1], n - 1) + 1))
    names = [f"t{i}" for i in range(n)]
    facts = names[:n_fact]

    parents: dict[str, list[str]] = {names[0]: []}
    parents[names[1]] = [names[0]]
    for i in range(2, n_fact):
        parents[names[i]] = [facts[int(rng.integers(0, i))]]
    for name in names[n_fact:]:
        k = int(rng.integers(1, 3))
        chosen = sorted(rng.choice(n_fact, size=k, replace=False).tolist())
        parents[name] = [facts[c] for c in chosen]

    relations = []
    tables = []
    for i, name in enumerate(names):
        rows = int(rng.integers(cfg.rows[0], cfg.rows[1] + 1))
        fk_cols = tuple(f"fk_{p}" for p in parents[name])
        for p, col in zip(parents[name], fk_cols):
            relations.append(JoinRelation(name, col, p))
        boot_cols: tuple[str, ...] = ()
        if i > 0 and rng.random() < cfg.bootstrap_prob:
            source = tables[int(rng.integers(0, i))]
            k = int(rng.integers(1, len(source.columns) + 1))
            picked = sorted(rng.choice(len(source.columns), size=k, replace=False).tolist())
            cols = tuple(ColumnSpec(f"a{j}", source.columns[c].kind, source.columns[c].domain_size,
                                    source.columns[c].skew, source.columns[c].correlation_group)
                         for j, c in enumerate(picked))
            bootstrap = source.name
            boot_cols = tuple(source.columns[c].name for c in picked)
        else:
            cols = _gen_column_specs(rng, cfg)
            bootstrap = None
        tables.append(TableSpec(
            name=name, row_count=rows, columns=cols, fk_columns=fk_cols,
            fk_attribute=cols[0].name if fk_cols else None, bootstrap_from=bootstrap,
            bootstrap_columns=boot_cols))
    schema = JoinSchema(tuple(tables), tuple(facts), tuple(relations))
    assert schema.is_connected()
    return schema


def _gen_column_specs(rng: np.random.Generator, cfg: GenConfig) -> tuple[ColumnSpec, ...]:
    c = int(rng.integers(cfg.n_columns[0], cfg.n_columns[1] + 1))
    lo, hi = np.log(cfg.domain[0]), np.log(cfg.domain[1])
    cols = []
    for j in range(c):
        kind = "numeric" if rng.random() < cfg.numeric_fraction else "categorical"
        domain = int(np.clip(round(float(np.exp(rng.uniform(lo, hi)))), cfg.domain[0], cfg.domain[1]))
        skew = float(round(rng.uniform(*cfg.skew), 6))
        group = 0 if rng.random() < cfg.correlation_prob else None
        cols.append(ColumnSpec(f"a{j}", kind, domain, skew, group))
    return tuple(cols)


# ---------------------------------------------------------------------------
# S2 / S3


def zipf_probs(domain_size: int, skew: float) -> np.ndarray:
    w = (np.arange(1, domain_size + 1, dtype=np.float64)) ** (-skew)
    return w / w.sum()


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(probs) - 1).astype(np.int64)


def gen_table(spec: TableSpec, seed, cfg: GenConfig | None = None,
              source: dict[str, np.ndarray] | None = None,
              source_spec: TableSpec | None = None) -> dict[str, np.ndarray]:
    """Attribute columns plus the primary key ``1..row_count``.

    Columns sharing a correlation group draw their inverse-CDF uniforms from a
    per-row latent variable with probability ``correlation_strength``, which
    couples them while leaving each marginal Zipf-like.
    """
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    r = spec.row_count
    out: dict[str, np.ndarray] = {}
    if spec.bootstrap_from is not None:
        if source is None or source_spec is None:
            raise OrderingError(f"{spec.name} bootstraps from {spec.bootstrap_from}, which is not materialized")
        rows = rng.integers(0, source_spec.row_count, size=r)
        for col, src in zip(spec.columns, spec.bootstrap_columns):
            out[col.name] = source[src][rows].astype(np.int64)
    else:
        latent = rng.random(r)
        for col in spec.columns:
            u = rng.random(r)
            if col.correlation_group is not None:
                take = rng.random(r) < cfg.correlation_strength
                u = np.where(take, latent, u)
            out[col.name] = _inverse_cdf(zipf_probs(col.domain_size, col.skew), u)
    out[spec.pk_column] = np.arange(1, r + 1, dtype=np.int64)
    return out


def gen_join_keys(spec: TableSpec, schema: JoinSchema, seed,
                  materialized: dict[str, dict[str, np.ndarray]],
                  cfg: GenConfig | None = None) -> dict[str, np.ndarray]:
    """Foreign-key columns, one per referenced fact table.

    With conditioning on, each FK value is (with probability
    ``fk_correlation``) a Zipf draw shifted by an offset determined by the
    table's designated attribute, so key and attribute are dependent.
    """
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    if spec.name not in materialized:
        raise OrderingError(f"attributes of {spec.name} must be generated before its keys")
    out: dict[str, np.ndarray] = {}
    r = spec.row_count
    for parent, col in zip(schema.parents_of(spec.name), spec.fk_columns):
        if parent not in materialized:
            raise OrderingError(f"parent table {parent} of {spec.name} is not materialized")
        rp = schema.table(parent).row_count
        uniform = rng.integers(1, rp + 1, size=r)
        if not cfg.fk_conditioning or spec.fk_attribute is None:
            out[col] = uniform.astype(np.int64)
            continue
        attr = materialized[spec.name][spec.fk_attribute]
        d = spec.column(spec.fk_attribute).domain_size
        offset = (attr * rp) // d
        z = _inverse_cdf(zipf_probs(rp, cfg.fk_skew), rng.random(r))
        follow = rng.random(r) < cfg.fk_correlation
        out[col] = np.where(follow, 1 + (offset + z) % rp, uniform).astype(np.int64)
    return out


def generate_database(seed: int, cfg: GenConfig | None = None, name: str | None = None) -> Database:
    cfg = cfg or GenConfig()
    schema = gen_join_schema(seed, cfg)
    children = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 2]).spawn(2 * len(schema.tables))
    data: dict[str, dict[str, np.ndarray]] = {}
    for i, spec in enumerate(schema.tables):
        src_spec = schema.table(spec.bootstrap_from) if spec.bootstrap_from else None
        src = data.get(spec.bootstrap_from) if spec.bootstrap_from else None
        data[spec.name] = gen_table(spec, children[i], cfg, src, src_spec)
    for i, spec in enumerate(schema.tables):
        data[spec.name].update(gen_join_keys(spec, schema, children[len(schema.tables) + i], data, cfg))
    return Database(schema, data, int(seed), name or f"db{seed}")


# ---------------------------------------------------------------------------
# adjacency


def adjacency_matrix(schema: JoinSchema, query) -> np.ndarray:
    """Symmetric boolean matrix over ``query.tables``: True where a join predicate links them."""
    tables = list(query.tables)
    known = set(schema.names)
    for t in tables:
        if t not in known:
            raise KeyError(f"query references unknown table {t!r}")
    pos = {t: i for i, t in enumerate(tables)}
    adj = np.zeros((len(tables), len(tables)), dtype=bool)
    for jp in query.joins:
        i, j = pos[jp.left_table], pos[jp.right_table]
        if i != j:
            adj[i, j] = adj[j, i] = True
    return adj


# ---------------------------------------------------------------------------
# persistence


def schema_to_dict(schema: JoinSchema) -> dict:
    return {
        "tables": [
            {**{k: v for k, v in asdict(t).items() if k != "columns"},
             "columns": [asdict(c) for c in t.columns]}
            for t in schema.tables
        ],
        "fact_tables": list(schema.fact_tables),
        "relations": [asdict(r) for r in schema.relations],
    }


def schema_from_dict(d: dict) -> JoinSchema:
    tables = []
    for t in d["tables"]:
        cols = tuple(ColumnSpec(**c) for c in t["columns"])
        tables.append(TableSpec(
            name=t["name"], row_count=int(t["row_count"]), columns=cols,
            pk_column=t["pk_column"], fk_columns=tuple(t["fk_columns"]),
            fk_attribute=t["fk_attribute"], bootstrap_from=t["bootstrap_from"],
            bootstrap_columns=tuple(t.get("bootstrap_columns", ()))))
    rels = tuple(JoinRelation(**r) for r in d["relations"])
    return JoinSchema(tuple(tables), tuple(d["fact_tables"]), rels)


def encode_table(columns: dict[str, np.ndarray]) -> bytes:
    names = list(columns)
    n_rows = len(columns[names[0]]) if names else 0
    parts = [TABLE_MAGIC, struct.pack("<IQ", len(names), n_rows)]
    for name in names:
        arr = np.ascontiguousarray(columns[name], dtype="<i8")
        if len(arr) != n_rows:
            raise FormatError("ragged table")
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, arr.tobytes()]
    return b"".join(parts)


def decode_table(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:6] != TABLE_MAGIC:
        raise FormatError("bad table magic")
    try:
        return _decode_columns(raw)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt table file: {exc}") from None


def _decode_columns(raw: bytes) -> dict[str, np.ndarray]:
    n_cols, n_rows = struct.unpack_from("<IQ", raw, 6)
    pos = 6 + 12
    out = {}
    for _ in range(n_cols):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        out[name] = np.frombuffer(raw, dtype="<i8", count=n_rows, offset=pos).astype(np.int64)
        pos += 8 * n_rows
    if pos != len(raw):
        raise FormatError("trailing bytes in table file")
    return out


def save_database(db: Database, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    desc = {"format": "MTDB1", "version": SCHEMA_VERSION, "name": db.name, "seed": db.seed,
            **schema_to_dict(db.schema)}
    for spec in db.schema.tables:
        atomic_write_bytes(os.path.join(directory, f"{spec.name}.mtdb"), encode_table(db.data[spec.name]))
    atomic_write_bytes(os.path.join(directory, "schema.json"),
                       (json.dumps(desc, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def load_database(directory) -> Database:
    with open(os.path.join(directory, "schema.json"), encoding="utf-8") as fh:
        desc = json.load(fh)
    if desc.get("format") != "MTDB1" or desc.get("version") != SCHEMA_VERSION:
        raise FormatError("unsupported database descriptor")
    schema = schema_from_dict(desc)
    data = {}
    for spec in schema.tables:
        with open(os.path.join(directory, f"{spec.name}.mtdb"), "rb") as fh:
            data[spec.name] = decode_table(fh.read())
    return Database(schema, data, int(desc["seed"]), desc.get("name", "db"))
