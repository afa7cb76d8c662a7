"""Multi-reference face reenactment with angle-binned perceptual evaluation."""

from .config import ConfigError, ModelConfig, TrainConfig, desk_train_config, full_train_config
from .fusion import FusionUnit, fuse, normalize_masks
from .model.generator import ReenactmentModel, reenact

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FusionUnit",
    "ModelConfig",
    "ReenactmentModel",
    "TrainConfig",
    "desk_train_config",
    "fuse",
    "normalize_masks",
    "full_train_config",
    "reenact",
]
