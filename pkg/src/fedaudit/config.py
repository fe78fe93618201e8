"""Experiment configuration: nested dataclasses, JSON loading and hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

from .attack import AttackConfig
from .canary import DesignConfig
from .data import PopulationConfig
from .fl import DpConfig, LocalTrainConfig
from .models import ModelSpec

SEED_ENV = "AUDIT_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "linear"
    hidden_dim: int = 16

    def spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        hidden = self.hidden_dim if self.arch == "mlp1" else 0
        return ModelSpec(self.arch, input_dim, num_classes, hidden)


@dataclass
class ExperimentConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    dp: DpConfig = field(default_factory=DpConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    server_lr: float = 1.0
    rounds: int = 100
    attack_frequency: int = 10
    checkpoint_every: int = 10
    # when set, the noise multiplier is solved so that training ends at this epsilon
    target_epsilon: float | None = None
    # ablation checkpoints are taken once accuracy reaches this fraction of the
    # non-private ceiling
    accuracy_fraction: float = 0.9
    max_rounds: int = 2000
    dataset_csv: str | None = None
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1

    def validate(self):
        try:
            self.population.validate()
            self.model.spec(self.population.input_dim, self.population.num_classes)
            self.train.validate()
            self.dp.validate()
            self.design.validate()
            self.attack.validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.rounds < 1:
            raise ConfigError("rounds must be positive")
        if not 1 <= self.attack_frequency <= self.rounds:
            raise ConfigError("attack_frequency must lie in [1, rounds]")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")
        if self.server_lr <= 0:
            raise ConfigError("server_lr must be positive")
        if self.target_epsilon is not None and not self.target_epsilon > 0:
            raise ConfigError("target_epsilon must be positive")
        if not 0 < self.accuracy_fraction <= 1:
            raise ConfigError("accuracy_fraction must lie in (0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        return config_hash(self)


_SECTIONS = {"population": PopulationConfig, "model": ModelConfig, "train": LocalTrainConfig,
             "dp": DpConfig, "design": DesignConfig, "attack": AttackConfig}


def _plain(obj):
    # JSON has no infinity; the IID sentinel is written as the string "inf"
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _unplain(value, current):
    if isinstance(value, str) and value in ("inf", "-inf") and not isinstance(current, str):
        return float(value)
    return value


def _coerce(cls, name, value):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    t = str(types[name])
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null")
                         and "None" in t):
        return None
    try:
        if t.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{cls.__name__}.{name} must be an integer, got {value!r}")
            return int(value)
        if t.startswith("float"):
            return float(value)
        if t.startswith("str"):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}.{name}: {exc}") from exc
    return value


def _update(obj, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key {where}{key}")
        current = getattr(obj, key)
        if key in _SECTIONS and isinstance(obj, ExperimentConfig):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            _update(current, value, f"{key}.")
            continue
        setattr(obj, key, _coerce(type(obj), key, _unplain(value, current)))


def from_dict(values: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _update(cfg, values, "")
    return cfg


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            values = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(values)


def set_dotted(cfg: ExperimentConfig, dotted: str, value):
    """Assign ``section.field`` (or a top-level field) from a string or number."""
    parts = dotted.split(".")
    if len(parts) == 1:
        _update(cfg, {parts[0]: value}, "")
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        _update(getattr(cfg, parts[0]), {parts[1]: value}, parts[0] + ".")
    else:
        raise ConfigError(f"unknown config key {dotted}")


def apply_env(cfg: ExperimentConfig, environ=os.environ) -> ExperimentConfig:
    raw = environ.get(SEED_ENV)
    if raw not in (None, ""):
        try:
            cfg.seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return cfg


# where a run is written and how many threads it uses cannot change its numbers
_UNHASHED = ("output_dir", "workers")


def config_hash(cfg: ExperimentConfig) -> str:
    values = {k: v for k, v in cfg.to_dict().items() if k not in _UNHASHED}
    canon = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
