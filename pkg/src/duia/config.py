"""Experiment configuration: nested dataclasses loaded from YAML with strict keys."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import yaml

from .data import DataError, GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: Optional[str] = None
    train_fraction: float = 0.8
    max_history: int = 50
    cohort_percentile: float = 32.0


@dataclass
class NetConfig:
    k1: int
    branching: int


@dataclass
class ModelConfig:
    embedding_dim: int = 16
    buckets: int = 10_000
    hashing: str = "modulo"
    d: int = 16
    tower_hidden: list = field(default_factory=lambda: [64, 32])
    user_net: NetConfig = field(default_factory=lambda: NetConfig(32, 8))
    item_net: NetConfig = field(default_factory=lambda: NetConfig(64, 8))
    backbone: str = "ple_lite"
    expert_sizes: list = field(default_factory=lambda: [64, 32])
    tower_sizes: list = field(default_factory=lambda: [16])
    n_shared_experts: int = 2
    n_specific_experts: int = 1
    merge_weights: list = field(default_factory=lambda: [1.0, 1.0])
    global_level2: bool = False
    uhse_use_level1: bool = True


@dataclass
class DuiaConfig:
    uie: bool = True
    upbe: bool = True
    uhse: bool = True
    aux: bool = True
    rho: float = 0.05
    lam: float = 0.05
    eta: float = 0.05
    sample_rate_low: float = 0.3
    sample_rate_high: float = 0.3
    reinit_dead_after: int = 200

    @property
    def any_component(self) -> bool:
        return self.uie or self.upbe or self.uhse


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 0.001
    center_lr: Optional[float] = 0.01  # None falls back to lr
    store_lr: Optional[float] = 0.05  # UPBE store vectors; None falls back to lr
    personal_lr: Optional[float] = None  # UIE personal vectors; None falls back to lr
    batch_size: int = 256
    epochs: int = 2
    single_pass: bool = False
    eval_batch_size: int = 4096


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    duia: DuiaConfig = field(default_factory=DuiaConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def validate(self) -> "ExperimentConfig":
        try:
            self._check()
            self.generator.validate()
        except DataError as exc:
            raise ConfigError(f"generator: {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid value type: {exc}") from None
        return self

    def _check(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        m, o, dd, dt = self.model, self.optim, self.duia, self.data
        positive = {
            "model.embedding_dim": m.embedding_dim, "model.buckets": m.buckets, "model.d": m.d,
            "model.user_net.k1": m.user_net.k1, "model.user_net.branching": m.user_net.branching,
            "model.item_net.k1": m.item_net.k1, "model.item_net.branching": m.item_net.branching,
            "optim.batch_size": o.batch_size, "optim.epochs": o.epochs, "optim.eval_batch_size": o.eval_batch_size,
            "data.max_history": dt.max_history, "optim.lr": o.lr,
        }
        for key, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{key} must be positive, got {value}")
        for key in ("center_lr", "store_lr", "personal_lr"):
            value = getattr(o, key)
            if value is not None and not value > 0:
                raise ConfigError(f"optim.{key} must be positive")
        if m.hashing not in ("modulo", "multiply_shift"):
            raise ConfigError(f"model.hashing must be modulo or multiply_shift, got {m.hashing!r}")
        if m.backbone not in ("ple_lite", "shared_bottom"):
            raise ConfigError(f"model.backbone must be ple_lite or shared_bottom, got {m.backbone!r}")
        if o.kind not in ("adam", "sgd"):
            raise ConfigError(f"optim.kind must be adam or sgd, got {o.kind!r}")
        if len(m.merge_weights) != 2:
            raise ConfigError("model.merge_weights needs one weight per task (2)")
        for key in ("rho", "lam", "eta"):
            if not 0.0 <= getattr(dd, key) <= 1.0:
                raise ConfigError(f"duia.{key} must lie in [0, 1]")
        for key in ("sample_rate_low", "sample_rate_high"):
            if not 0.0 <= getattr(dd, key) <= 1.0:
                raise ConfigError(f"duia.{key} must lie in [0, 1]")
        if not 0.0 < dt.train_fraction < 1.0:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
        if not 0.0 <= dt.cohort_percentile <= 100.0:
            raise ConfigError("data.cohort_percentile must lie in [0, 100]")
        if any(int(h) <= 0 for h in list(m.tower_hidden) + list(m.expert_sizes) + list(m.tower_sizes)):
            raise ConfigError("layer widths must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Optional[dict]) -> "ExperimentConfig":
        return _build(cls, obj or {}, "").validate()


def _build(cls, obj, prefix: str, base=None):
    """Overlay ``obj`` onto ``base`` (or the class defaults), rejecting unknown keys."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    base = cls() if base is None else base
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in obj.items():
        current = getattr(base, name)
        if is_dataclass(current) and value is not None:
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.", current)
        else:
            kwargs[name] = value
    return replace(base, **kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            obj = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return ExperimentConfig.from_dict(obj)


DEFAULT_CONFIG_PATH = Path(__file__).with_name("default_config.yaml")
