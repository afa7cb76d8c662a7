"""Unsupervised keypoint detector with local affine (Jacobian) estimates."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..config import ConfigError, ModelConfig
from .blocks import AntiAliasInterpolation2d, Hourglass, make_coordinate_grid


@dataclass
class KeypointSet:
    """Batched keypoints: ``value`` (B, K_p, 2) in [-1, 1], ``jacobian`` (B, K_p, 2, 2)."""

    value: torch.Tensor
    jacobian: torch.Tensor | None = None

    @property
    def num_kp(self) -> int:
        return self.value.shape[1]

    def detach(self) -> "KeypointSet":
        jac = None if self.jacobian is None else self.jacobian.detach()
        return KeypointSet(self.value.detach(), jac)

    def index(self, idx) -> "KeypointSet":
        jac = None if self.jacobian is None else self.jacobian[idx]
        return KeypointSet(self.value[idx], jac)


def heatmap_to_keypoints(heatmap: torch.Tensor) -> torch.Tensor:
    """Soft-argmax: expected (x, y) under each normalized heatmap (B, K, h, w)."""
    grid = make_coordinate_grid(*heatmap.shape[2:], dtype=heatmap.dtype, device=heatmap.device)
    return (heatmap.unsqueeze(-1) * grid).sum(dim=(2, 3))


def keypoints_to_gaussian(value: torch.Tensor, spatial_size, kp_variance: float) -> torch.Tensor:
    """Render each keypoint as an isotropic Gaussian blob, (B, K, h, w)."""
    grid = make_coordinate_grid(*spatial_size, dtype=value.dtype, device=value.device)
    diff = grid.view(1, 1, *spatial_size, 2) - value.view(*value.shape[:2], 1, 1, 2)
    return torch.exp(-0.5 * (diff**2).sum(-1) / kp_variance)


class KPDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.predictor = Hourglass(
            cfg.kp_block_expansion, cfg.num_channels, cfg.kp_num_blocks, cfg.kp_max_features
        )
        self.kp = nn.Conv2d(self.predictor.out_filters, cfg.num_kp, kernel_size=7, padding=0)
        if cfg.estimate_jacobian:
            self.jacobian = nn.Conv2d(self.predictor.out_filters, 4 * cfg.num_kp, kernel_size=7, padding=0)
            # start from identity local transforms
            nn.init.zeros_(self.jacobian.weight)
            with torch.no_grad():
                self.jacobian.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 1.0]).repeat(cfg.num_kp))
        else:
            self.jacobian = None
        self.down = AntiAliasInterpolation2d(cfg.num_channels, cfg.kp_scale_factor)

    def forward(self, image: torch.Tensor) -> KeypointSet:
        res = self.cfg.resolution
        if image.dim() != 4 or image.shape[1:] != (self.cfg.num_channels, res, res):
            raise ConfigError(
                f"expected images of shape (B, {self.cfg.num_channels}, {res}, {res}), got {tuple(image.shape)}"
            )
        feature_map = self.predictor(self.down(image))
        logits = self.kp(feature_map)
        b, k, h, w = logits.shape
        heatmap = F.softmax(logits.view(b, k, -1) / self.cfg.kp_temperature, dim=2).view(b, k, h, w)
        value = heatmap_to_keypoints(heatmap)

        jacobian = None
        if self.jacobian is not None:
            jac_map = self.jacobian(feature_map).view(b, k, 4, h, w)
            jacobian = (heatmap.unsqueeze(2) * jac_map).sum(dim=(3, 4)).view(b, k, 2, 2)
        return KeypointSet(value, jacobian)
