"""Experiment configuration: one JSON document, nested dataclasses, strict keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .featurize import EncoderTrainConfig, FeatureConfig
from .losses import LossWeights
from .oracle import CostParams
from .schema_gen import ConfigError, GenConfig
from .training import TrainConfig
from .workload import QueryConfig


@dataclass
class ModelOptions:
    d_m: int = 64
    n_heads: int = 4
    n_blocks: int = 3
    dec_blocks: int = 3
    mask_untouched: bool = True
    bushy: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train_dbs: int = 4
    n_heldout_dbs: int = 1
    gen: GenConfig = field(default_factory=lambda: GenConfig(n_tables=(6, 6), rows=(1500, 2500)))
    queries: QueryConfig = field(default_factory=QueryConfig)
    n_queries: int = 2000
    n_test_queries: int = 200
    n_single_queries: int = 300
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    seq_epochs: int = 1
    seq_queries: int = 200
    finetune_fraction: float = 0.2
    finetune_epochs: int = 10
    cost: CostParams = field(default_factory=CostParams)
    baseline_samples: int = 1000

    def validate(self) -> None:
        self.gen.validate()
        self.queries.validate(self.gen.n_tables[0])
        if self.n_train_dbs < 1 or self.n_heldout_dbs not in (0, 1):
            raise ConfigError("need >= 1 training database and 0 or 1 held-out database")
        if self.n_queries < 1 or self.n_test_queries < 1 or self.n_single_queries < 1:
            raise ConfigError("workload sizes must be positive")
        if not 0.0 < self.finetune_fraction <= 1.0:
            raise ConfigError("finetune_fraction must lie in (0, 1]")
        if self.gen.n_tables[1] > self.features.n_max:
            raise ConfigError("schemas may exceed the one-hot table capacity n_max")
        if self.queries.max_tables > self.features.m_max:
            raise ConfigError("queries may exceed m_max tables")

    @property
    def db_ids(self) -> list[str]:
        return [f"db{i}" for i in range(self.n_train_dbs + self.n_heldout_dbs)]

    @property
    def train_db_ids(self) -> list[str]:
        return self.db_ids[:self.n_train_dbs]

    @property
    def heldout_db_id(self) -> str | None:
        return self.db_ids[-1] if self.n_heldout_dbs else None


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kw = {}
    for key, val in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kw[key] = _build(tp, val, f"{path}.{key}" if path else key)
        elif isinstance(val, list):
            kw[key] = tuple(val)
        else:
            kw[key] = val
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, d, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def canonical_json(d) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode()).hexdigest()


__all__ = [
    "ExperimentConfig", "ModelOptions", "LossWeights", "config_from_dict", "config_hash",
    "config_to_dict", "load_config",
]
