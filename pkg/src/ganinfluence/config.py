"""Experiment configuration: one YAML/JSON tree, validated before any compute.

Every section is a dataclass; unknown keys and wrong types are rejected with
a :class:`ConfigError` naming the offending path.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

SCHEMA_VERSION = 1
OUTPUT_ENV = "GANINFLUENCE_OUTPUT_ROOT"


@dataclass
class SpecSection:
    model: str = "lqgan"
    loss: str = "original"
    reg_rates: list = field(default_factory=lambda: [0.0, 0.0])
    latent_dim: int = 1
    data_dim: int = 1
    hidden: list = field(default_factory=lambda: [16, 16])
    activation: str = "tanh"
    init_scale: float = 0.1


@dataclass
class SamplerSection:
    """``source``: ``sampler`` (family/params), ``contaminated`` or ``csv`` (path)."""

    source: str = "sampler"
    family: str = "normal"
    params: dict = field(default_factory=lambda: {"mean": 1.0, "std": 1.0})
    count: int = 1000
    seed: int = 1
    path: str | None = None


@dataclass
class DataSection(SamplerSection):
    latent_count: int | None = None
    latent_seed: int = 2


@dataclass
class TrainSection:
    T: int = 1000
    eta: float = 0.01
    seed: int = 0
    batch_size: int | None = None
    latent_batch: int | None = None
    backend: str = "auto"
    guard: float = 1e8


@dataclass
class MetricSection:
    name: str = "all"
    bandwidth: float = 1.0
    n_gen: int = 1000
    latent_seed: int = 12345


@dataclass
class InfluenceSection:
    estimator: str = "itd"
    target: str = "metric"      # or "disc_loss"
    gamma: float = 0.0
    aid_m: int = 100
    aid_eta: float | None = None
    window: int | None = None
    targets: list | None = None
    backend: str = "autodiff"


@dataclass
class CleanseSection:
    scorer: str = "itd"
    rates: list = field(default_factory=lambda: [0.01, 0.05, 0.10])
    retrain: str = "full"
    seeds: list = field(default_factory=lambda: [0])
    renormalize: bool = True
    T: int = 10000
    eta: float = 0.01
    aid_m: int = 10000
    gamma: float = 0.0
    epoch_steps: int | None = None


@dataclass
class VerifySection:
    Ts: list = field(default_factory=lambda: [100])
    Ms: list = field(default_factory=lambda: [100])
    etas: list = field(default_factory=lambda: [0.01])
    gammas: list = field(default_factory=lambda: [0.0])
    n_targets: int = 100
    estimators: list = field(default_factory=lambda: ["itd", "aid"])


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    output: str = "runs/default"
    spec: SpecSection = field(default_factory=SpecSection)
    data: DataSection = field(default_factory=DataSection)
    validation: SamplerSection = field(default_factory=lambda: SamplerSection(seed=3))
    train: TrainSection = field(default_factory=TrainSection)
    metric: MetricSection = field(default_factory=MetricSection)
    influence: InfluenceSection = field(default_factory=InfluenceSection)
    cleanse: CleanseSection = field(default_factory=CleanseSection)
    verify: VerifySection = field(default_factory=VerifySection)

    def to_dict(self):
        return dataclasses.asdict(self)

    def output_dir(self) -> Path:
        """``output``, placed under ``$GANINFLUENCE_OUTPUT_ROOT`` when that is set and it is relative."""
        root = os.environ.get(OUTPUT_ENV)
        out = Path(self.output)
        return Path(root) / out if root and not out.is_absolute() else out


# --- validation ------------------------------------------------------------------------

def _check(value, tp, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return value
        inner = [a for a in args if a is not type(None)]
        return _check(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return list(value)
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return dict(value)
    return value


def _build(cls, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kw = {k: _check(v, hints[k], f"{path}.{k}" if path else k) for k, v in raw.items()}
    return cls(**kw)


_CHOICES = {
    "spec.model": ("lqgan", "mlp"),
    "spec.loss": ("original", "nonsaturating", "wasserstein"),
    "data.source": ("sampler", "contaminated", "csv"),
    "validation.source": ("sampler", "csv"),
    "train.backend": ("auto", "autodiff", "analytic"),
    "metric.name": ("all", "frechet"),
    "influence.estimator": ("itd", "aid"),
    "influence.target": ("metric", "disc_loss"),
    "influence.backend": ("auto", "autodiff", "analytic"),
    "cleanse.scorer": ("itd", "aid", "disc_itd", "disc_aid", "random"),
    "cleanse.retrain": ("full", "one_epoch"),
}


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {cfg.schema_version}")
    for key, allowed in _CHOICES.items():
        sec, name = key.split(".")
        val = getattr(getattr(cfg, sec), name)
        if val not in allowed:
            raise ConfigError(f"{key}: {val!r} not in {list(allowed)}")
    t = cfg.train
    if t.T < 0 or t.eta <= 0:
        raise ConfigError("train: need T >= 0 and eta > 0")
    if t.batch_size is not None and t.batch_size < 1:
        raise ConfigError("train.batch_size must be >= 1")
    if cfg.data.count < 1 or cfg.validation.count < 1:
        raise ConfigError("data/validation count must be >= 1")
    if cfg.data.source == "csv" and not cfg.data.path:
        raise ConfigError("data.path is required for csv source")
    if cfg.influence.aid_m < 1:
        raise ConfigError("influence.aid_m must be >= 1")
    if cfg.metric.bandwidth <= 0 or cfg.metric.n_gen < 1:
        raise ConfigError("metric: bandwidth must be positive and n_gen >= 1")
    v = cfg.verify
    for name in ("Ts", "etas", "gammas", "estimators"):
        if not getattr(v, name):
            raise ConfigError(f"verify.{name}: grid must be non-empty")
    if "aid" in v.estimators and not v.Ms:
        raise ConfigError("verify.Ms: grid must be non-empty")
    rates = cfg.cleanse.rates
    if not rates or any(not 0 < r < 1 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
        raise ConfigError("cleanse.rates must be strictly increasing fractions in (0, 1)")
    if not cfg.cleanse.seeds:
        raise ConfigError("cleanse.seeds must be non-empty")
    return cfg


def from_dict(raw) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, raw, ""))


def load(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: cannot parse ({exc})") from None
    return from_dict(raw or {})


def dump(cfg: ExperimentConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def override(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """Set ``section.key`` (or a top-level key) and re-validate."""
    raw = cfg.to_dict()
    node = raw
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"cannot override {dotted}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"cannot override unknown key {dotted}")
    node[parts[-1]] = value
    return from_dict(raw)
