"""Single-file checkpoints: network weights plus a config manifest."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from .config import ConfigError, ModelConfig, TrainConfig, model_config_from_dict, to_dict, train_config_from_dict
from .model.generator import ReenactmentModel

FORMAT = "multiref-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, model: ReenactmentModel, train_config: TrainConfig | None = None,
                    epoch: int | None = None, discriminator=None, optimizers: dict | None = None,
                    extra: dict | None = None) -> None:
    state = {
        "format": FORMAT,
        "version": VERSION,
        "manifest": {
            "resolution": model.cfg.resolution,
            "channels": model.cfg.feature_channels,
            "num_kp": model.cfg.num_kp,
            "fusion_mode": model.cfg.fusion_mode,
            "model_config": to_dict(model.cfg),
            "train_config": None if train_config is None else to_dict(train_config),
            "epoch": epoch,
        },
        "model": model.state_dict(),
        "discriminator": None if discriminator is None else discriminator.state_dict(),
        "optimizers": {k: v.state_dict() for k, v in (optimizers or {}).items()},
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(state, dict) or state.get("format") != FORMAT:
        raise ConfigError(f"{path}: not a {FORMAT} file")
    if state.get("version") != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {state.get('version')}")
    return state


def load_model(path: str | Path) -> tuple[ReenactmentModel, dict]:
    """Rebuild the model from a checkpoint; returns (model in eval mode, raw state)."""
    state = read_checkpoint(path)
    cfg = model_config_from_dict(state["manifest"]["model_config"])
    model = ReenactmentModel(cfg)
    model.load_state_dict(state["model"])
    model.eval()
    return model, state


def manifest_train_config(state: dict) -> TrainConfig | None:
    raw = state["manifest"].get("train_config")
    return None if raw is None else train_config_from_dict(raw)


def manifest_model_config(state: dict) -> ModelConfig:
    return model_config_from_dict(state["manifest"]["model_config"])
