"""Run configuration: nested dataclasses, one JSON document, dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


@dataclass
class GeneratorConfig:
    scenes: int = 1000
    size: int = 64
    seed: int = 7
    buildings: list[int] = field(default_factory=lambda: [2, 6])
    trees: list[int] = field(default_factory=lambda: [2, 8])


@dataclass
class SplitsConfig:
    labeled_fraction: float = 0.01


@dataclass
class BinsConfig:
    strategy: str = "HBC"
    num_classes: int = 8
    hbc_samples: int = 100_000


@dataclass
class ModelConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    ema_alpha: float = 0.99
    height_scale: float = 10.0


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class ScheduleConfig:
    epochs: int = 60
    steps_per_epoch: int = 10
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    threshold_decay: float = 0.0  # 0 = reach the 0.5 floor halfway through training
    pl_list_size: int = 256
    val_batch: int = 8


@dataclass
class VariantConfig:
    pipeline: str = "regcls.-reg. (TSE)"
    pl: bool = True
    ranking: bool = True
    dynamic_threshold: bool = True


@dataclass
class LossConfig:
    cls: float = 1.0
    reg_teacher: float = 1.0
    pl: float = 1.0
    sup_student: float = 1.0
    unlabeled: float = 1.0


@dataclass
class AugmentConfig:
    gamma: list[float] = field(default_factory=lambda: [0.7, 1.5])
    brightness: float = 0.2
    contrast: list[float] = field(default_factory=lambda: [0.8, 1.25])
    blur_sigma: list[float] = field(default_factory=lambda: [0.0, 1.5])


@dataclass
class EvalConfig:
    bucket_width: float = 10.0
    split: str = "test"
    val_scenes: int = 0  # 0 = score every validation scene each epoch


@dataclass
class PathsConfig:
    dataset: str = "data/synthetic"
    output: str = "runs"
    run_name: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    seeds: int = 1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    splits: SplitsConfig = field(default_factory=SplitsConfig)
    bins: BinsConfig = field(default_factory=BinsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(f"{key}: expected a JSON list, got {value!r}") from None
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(default, str):
        return str(value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


def _apply(obj: Any, data: dict, prefix: str = "") -> None:
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected an object")
            _apply(current, value, dotted + ".")
        else:
            setattr(obj, key, _coerce(value, current, dotted))


def set_dotted(cfg: RunConfig, key: str, value: Any) -> None:
    parts = key.split(".")
    nested: dict = {parts[-1]: value}
    for part in reversed(parts[:-1]):
        nested = {part: nested}
    _apply(cfg, nested)


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    _apply(cfg, data)
    return cfg


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None,
                env: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the JSON file, then dotted overrides, then ``TSE_SEED``."""
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        _apply(cfg, data)
    for key, value in (overrides or {}).items():
        set_dotted(cfg, key, value)
    env = os.environ if env is None else env
    if env.get("TSE_SEED"):
        cfg.seed = _coerce(env["TSE_SEED"], 0, "TSE_SEED")
    return cfg
