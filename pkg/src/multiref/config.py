"""Model and training configuration with YAML round-tripping."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for inconsistent shapes, sizes or manifests."""


FUSION_MODES = ("patch", "element")


@dataclass
class ModelConfig:
    resolution: int = 64
    num_channels: int = 3
    num_kp: int = 10
    # generator; feature channels C = block_expansion * 2 ** num_down_blocks
    block_expansion: int = 8
    max_features: int = 512
    num_down_blocks: int = 2
    num_bottleneck_blocks: int = 2
    # keypoint detector
    kp_block_expansion: int = 16
    kp_max_features: int = 128
    kp_num_blocks: int = 3
    kp_scale_factor: float = 0.5
    kp_temperature: float = 0.1
    estimate_jacobian: bool = True
    # dense motion network
    dm_block_expansion: int = 16
    dm_max_features: int = 128
    dm_num_blocks: int = 3
    dm_scale_factor: float = 0.25
    kp_variance: float = 0.01
    # fusion unit
    fusion_mode: str = "patch"
    fusion_kernel_size: int = 7
    # discriminator (stage 2)
    disc_block_expansion: int = 16
    disc_num_blocks: int = 3
    disc_max_features: int = 128
    disc_scales: tuple[float, ...] = (1.0,)

    def __post_init__(self) -> None:
        self.disc_scales = tuple(self.disc_scales)
        self.validate()

    @property
    def feature_channels(self) -> int:
        return min(self.max_features, self.block_expansion * 2**self.num_down_blocks)

    @property
    def feature_size(self) -> int:
        return self.resolution // 2**self.num_down_blocks

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.resolution % 2**self.num_down_blocks:
            raise ConfigError("resolution must be divisible by 2 ** num_down_blocks")
        if self.num_kp < 1:
            raise ConfigError("num_kp must be positive")
        if self.fusion_kernel_size % 2 == 0:
            raise ConfigError("fusion_kernel_size must be odd")
        for name in ("kp_scale_factor", "dm_scale_factor"):
            s = getattr(self, name)
            if not 0 < s <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
            if abs(self.resolution * s - round(self.resolution * s)) > 1e-9:
                raise ConfigError(f"resolution * {name} must be an integer")


@dataclass
class LossWeights:
    perceptual: float = 10.0
    equivariance_value: float = 10.0
    equivariance_jacobian: float = 10.0
    generator_gan: float = 1.0
    discriminator_gan: float = 1.0
    feature_matching: float = 10.0


@dataclass
class TrainConfig:
    K: int = 3
    stage1_epochs: int = 20
    stage2_epochs: int = 10
    batch_size: int = 8
    lr: float = 2e-4
    decay_epochs: list[int] = field(default_factory=lambda: [12, 18])
    decay_factor: float = 0.1
    decay_kind: str = "step"  # "step" or "linear"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    samples_per_epoch: int = 256
    resolution: int = 64
    channels: int = 32
    perceptual_scales: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    perceptual_backbone: str = "pixel"  # "pixel" or "vgg19"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    equivariance_sigma_affine: float = 0.05
    equivariance_sigma_tps: float = 0.005
    equivariance_points_tps: int = 5
    checkpoint_every: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.adam_betas = tuple(self.adam_betas)
        self.perceptual_scales = tuple(self.perceptual_scales)
        self.decay_epochs = list(self.decay_epochs)
        self.validate()

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs

    def validate(self) -> None:
        positive = ("K", "batch_size", "samples_per_epoch", "resolution", "channels")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.total_epochs < 1:
            raise ConfigError("epoch counts must be non-negative with a positive total")
        if self.lr <= 0 or self.decay_factor <= 0:
            raise ConfigError("lr and decay_factor must be positive")
        if self.decay_kind not in ("step", "linear"):
            raise ConfigError("decay_kind must be 'step' or 'linear'")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        if any(not 0 < e <= self.total_epochs for e in self.decay_epochs):
            raise ConfigError("decay_epochs must fall inside the training span")
        if self.perceptual_backbone not in ("pixel", "vgg19"):
            raise ConfigError("perceptual_backbone must be 'pixel' or 'vgg19'")


def full_train_config(**overrides: Any) -> TrainConfig:
    """Full-scale schedule: 100 + 50 epochs, batch 32, lr 2e-4 decayed at 60 and 90, resolution 256."""
    base = dict(
        K=3, stage1_epochs=100, stage2_epochs=50, batch_size=32, lr=2e-4,
        decay_epochs=[60, 90], decay_factor=0.1, resolution=256, channels=256,
    )
    base.update(overrides)
    return TrainConfig(**base)


def desk_train_config(**overrides: Any) -> TrainConfig:
    """Single-CPU preset: resolution 64, batch 8, 20 + 10 epochs."""
    base = dict(K=3, stage1_epochs=20, stage2_epochs=10, batch_size=8, resolution=64, channels=32)
    base.update(overrides)
    return TrainConfig(**base)


def model_config_for(train: TrainConfig, **overrides: Any) -> ModelConfig:
    """Derive a ModelConfig whose feature channel count matches ``train.channels``."""
    num_down = overrides.pop("num_down_blocks", 2)
    if train.channels % 2**num_down:
        raise ConfigError("channels must be divisible by 2 ** num_down_blocks")
    kw = dict(
        resolution=train.resolution,
        block_expansion=train.channels // 2**num_down,
        num_down_blocks=num_down,
        max_features=max(512, train.channels),
    )
    if train.resolution >= 256:
        kw.update(
            kp_block_expansion=32, kp_max_features=1024, kp_num_blocks=5, kp_scale_factor=0.25,
            dm_block_expansion=64, dm_max_features=1024, dm_num_blocks=5, dm_scale_factor=0.25,
            num_bottleneck_blocks=6, disc_block_expansion=32, disc_num_blocks=4, disc_max_features=512,
        )
    kw.update(overrides)
    return ModelConfig(**kw)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def to_dict(cfg: Any) -> dict:
    return _to_plain(cfg)


def _from_dict(cls: type, data: dict) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def model_config_from_dict(data: dict) -> ModelConfig:
    return _from_dict(ModelConfig, dict(data))


def train_config_from_dict(data: dict) -> TrainConfig:
    return _from_dict(TrainConfig, dict(data))


def load_config_file(path: str | Path) -> tuple[TrainConfig, ModelConfig]:
    """Read a YAML config with optional ``train:`` and ``model:`` sections.

    A flat mapping is treated as the ``train`` section.  Missing model keys
    are derived from the training resolution and channel count.
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    top_preset = raw.pop("preset", None)
    if "train" in raw or "model" in raw:
        train_raw, model_raw = raw.get("train") or {}, raw.get("model") or {}
        extra = set(raw) - {"train", "model"}
        if extra:
            raise ConfigError(f"{path}: unexpected sections {sorted(extra)}")
    else:
        train_raw, model_raw = raw, {}
    preset = train_raw.pop("preset", top_preset or "desk")
    factory = {"desk": desk_train_config, "full": full_train_config}.get(preset)
    if factory is None:
        raise ConfigError(f"unknown preset {preset!r}")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(train_raw) - known
    if unknown:
        raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
    train = factory(**train_raw)
    model = model_config_for(train, **model_raw)
    return train, model


def save_config_file(path: str | Path, train: TrainConfig, model: ModelConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump({"train": to_dict(train), "model": to_dict(model)}, fh, sort_keys=False)
