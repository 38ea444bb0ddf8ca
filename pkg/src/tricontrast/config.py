"""Training configuration: dataclasses plus strict JSON (de)serialization.

A config document is a single JSON object; unknown keys anywhere in it are
rejected so typos fail loudly instead of silently training the wrong model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

from .errors import ConfigError
from .objectives import ObjectiveParams


@dataclass
class DatasetSpec:
    mode: str = "gaussian-mixture"  # gaussian-mixture | tiny-grid
    num_classes: int = 8
    samples: int = 4096
    input_dim: int = 32
    cluster_std: float = 1.0
    cluster_radius: float = 5.0  # sphere radius for gaussian-mixture class means

    def validate(self) -> None:
        if self.mode not in ("gaussian-mixture", "tiny-grid"):
            raise ConfigError(f"unknown dataset mode {self.mode!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.samples < self.num_classes:
            raise ConfigError("need at least one sample per class")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.mode == "tiny-grid":
            side = int(round(self.input_dim ** 0.5))
            if side * side != self.input_dim:
                raise ConfigError("tiny-grid mode needs a square input_dim")


@dataclass
class AugmentationSpec:
    gaussian_noise_std: float = 0.5
    coordinate_mask_prob: float = 0.1
    random_scale_range: tuple[float, float] = (0.9, 1.1)
    crop_fraction: float = 1.0  # tiny-grid mode only; 1.0 disables cropping

    def validate(self) -> None:
        if not 0.0 <= self.coordinate_mask_prob <= 1.0:
            raise ConfigError("coordinate_mask_prob must lie in [0,1]")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ConfigError("crop_fraction must lie in (0,1]")
        lo, hi = self.random_scale_range
        if lo > hi:
            raise ConfigError("random_scale_range must be (low, high) with low <= high")
        if self.gaussian_noise_std < 0:
            raise ConfigError("gaussian_noise_std must be non-negative")


@dataclass
class ModelSpec:
    encoder_widths: list[int] = field(default_factory=lambda: [128, 128])
    projector_widths: list[int] = field(default_factory=lambda: [256, 256, 64])
    predictor_widths: list[int] = field(default_factory=lambda: [512, 64])
    transformer_layers: int = 3
    transformer_heads: int = 8

    def validate(self) -> None:
        for name, widths in (
            ("encoder_widths", self.encoder_widths),
            ("projector_widths", self.projector_widths),
            ("predictor_widths", self.predictor_widths),
        ):
            if not widths or any(w < 1 for w in widths):
                raise ConfigError(f"{name} must be a non-empty list of positive ints")
        if self.projector_widths[-1] != self.predictor_widths[-1]:
            raise ConfigError("projector and predictor output widths must agree")
        d = self.projector_widths[-1]
        if self.transformer_layers < 1 or self.transformer_heads < 1:
            raise ConfigError("transformer needs at least one layer and one head")
        if d % self.transformer_heads != 0:
            raise ConfigError(
                f"projection dim {d} not divisible by {self.transformer_heads} heads"
            )
        if d % 2 != 0:
            raise ConfigError("projection dim must be even for positional encoding")

    @property
    def projection_dim(self) -> int:
        return self.projector_widths[-1]


@dataclass
class TrainConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    objective: ObjectiveParams = field(default_factory=ObjectiveParams)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    batch_size: int = 128
    steps: int = 2000
    k_neighbours: int = 5
    queue_capacity: int = 4096
    base_lr: float = 1.0
    warmup_steps: int = 200
    transformer_lr: float = 0.1
    ema_momentum: float = 0.996
    ema_schedule: str = "fixed"
    sgd_momentum: float = 0.9
    seed: int = 0
    out_dir: str = "."

    def validate(self) -> None:
        self.dataset.validate()
        self.augmentation.validate()
        self.model.validate()
        if self.k_neighbours < 1:
            raise ConfigError("k_neighbours must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.steps > 0 and not 0 <= self.warmup_steps < self.steps:
            raise ConfigError("warmup_steps must satisfy 0 <= warmup < steps")
        if self.queue_capacity < self.k_neighbours:
            raise ConfigError("queue capacity must be at least k_neighbours")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must lie in [0,1]")
        if self.ema_schedule not in ("fixed", "cosine-to-one"):
            raise ConfigError(f"unknown ema_schedule {self.ema_schedule!r}")
        if self.transformer_lr < 0 or self.base_lr < 0:
            raise ConfigError("learning rates must be non-negative")


_SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelSpec,
    "objective": ObjectiveParams,
    "augmentation": AugmentationSpec,
}


def _build_section(cls, raw: dict, path: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys under {path}: {sorted(unknown)}")
    kwargs = dict(raw)
    if cls is AugmentationSpec and "random_scale_range" in kwargs:
        pair = kwargs["random_scale_range"]
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError("random_scale_range must be a [low, high] pair")
        kwargs["random_scale_range"] = (float(pair[0]), float(pair[1]))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad values under {path}: {exc}") from exc


def config_from_dict(raw: dict[str, Any]) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    top_known = set(TrainConfig.__dataclass_fields__)
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        cfg = TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config values: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path: str) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    out = asdict(cfg)
    out["augmentation"]["random_scale_range"] = list(
        out["augmentation"]["random_scale_range"]
    )
    return out


def dump_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
