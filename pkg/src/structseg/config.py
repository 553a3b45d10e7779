"""Experiment configuration: dataclasses, TOML loading, CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .errors import ConfigError
from .objectives import LossConfig
from .pixel_decoder import UNetConfig

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class BackboneConfig:
    kind: str = "synthetic"  # synthetic | dinov2_s | sam2_s
    seed: int = 0
    patch: int = 16
    depth: int = 2
    dim: int = 384


@dataclass
class DecoderConfig:
    num_blocks: int = 4
    num_heads: int = 8
    mlp_ratio: int = 4


@dataclass
class ModelConfig:
    kind: str = "vitc_unet"  # vitc_unet | hybrid | linear


@dataclass
class TrainConfig:
    lr: float = 1.5e-3
    weight_decay: float = 1e-2
    warmup_iters: int = 100
    batch_size: int = 8  # full-scale default is 32
    max_epochs: int = 100
    iters_per_epoch: int = 50  # full-scale default is 300
    patience: int = 10
    min_rel_improvement: float = 0.01
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    stage: str = "joint"  # joint | stage1 | stage2

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_epochs <= 0 or self.iters_per_epoch <= 0:
            raise ConfigError("train sizes must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass
class DataConfig:
    target_size: int = 96
    slice_axis: int = 0


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "backbone": BackboneConfig,
    "decoder": DecoderConfig,
    "unet": UNetConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def _build_section(name: str, cls, values: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in fields:
            raise ConfigError(f"unknown config key {name}.{key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in [{name}]: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    sections = {}
    for key, values in raw.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section [{key}]")
        if not isinstance(values, dict):
            raise ConfigError(f"config section [{key}] must be a table")
        sections[key] = _build_section(key, _SECTIONS[key], values)
    return ExperimentConfig(**sections)


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Load a TOML config (all keys optional) and apply dotted-key overrides
    like {"train.seed": 3}."""
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must be section.key")
        raw.setdefault(section, {})[key] = value
    return config_from_dict(raw)


def rebuild_config(d: dict) -> ExperimentConfig:
    """Reconstruct a config from a to_dict() snapshot."""
    return config_from_dict(d)
