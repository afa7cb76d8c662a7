"""Dense motion estimation from sparse keypoint motions, and feature warping."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..config import ConfigError, ModelConfig
from .blocks import AntiAliasInterpolation2d, Hourglass, make_coordinate_grid
from .keypoints import KeypointSet, keypoints_to_gaussian


@dataclass
class MotionField:
    """``flow`` (B, H', W', 2) sampling coordinates; ``occlusion`` (B, 1, H', W') in [0, 1]."""

    flow: torch.Tensor
    occlusion: torch.Tensor | None = None
    mask: torch.Tensor | None = None
    sparse_motion: torch.Tensor | None = None


@dataclass
class WarpedFeature:
    """Encoder feature after warping, tagged with the reference it came from."""

    data: torch.Tensor
    ref_index: int = 0


def identity_flow(batch: int, h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    return make_coordinate_grid(h, w, dtype, device).unsqueeze(0).expand(batch, h, w, 2).contiguous()


def sample(inp: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling at ``flow`` coordinates with border clamping."""
    return F.grid_sample(inp, flow.to(inp.dtype), mode="bilinear", padding_mode="border", align_corners=True)


def warp_feature(feature: torch.Tensor, motion: MotionField, ref_index: int = 0) -> WarpedFeature:
    """Resample ``feature`` (B, C, H', W') through ``motion`` and apply its occlusion map."""
    if feature.dim() != 4:
        raise ConfigError(f"feature must be (B, C, H', W'), got {tuple(feature.shape)}")
    if motion.flow.shape[1:3] != feature.shape[2:] or motion.flow.shape[0] != feature.shape[0]:
        raise ConfigError(
            f"flow {tuple(motion.flow.shape)} does not match feature {tuple(feature.shape)}"
        )
    out = sample(feature, motion.flow)
    if motion.occlusion is not None:
        if motion.occlusion.shape[2:] != feature.shape[2:]:
            raise ConfigError("occlusion map spatial size does not match feature")
        out = out * motion.occlusion
    return WarpedFeature(out, ref_index)


def sparse_motions(kp_ref: KeypointSet, kp_drv: KeypointSet, h: int, w: int) -> torch.Tensor:
    """Per-keypoint first-order backward maps, (B, K_p + 1, h, w, 2); slot 0 is identity.

    For a driving-frame location z the k-th map returns
    ``p_ref_k + J_ref_k J_drv_k^-1 (z - p_drv_k)``.
    """
    if kp_ref.num_kp != kp_drv.num_kp:
        raise ConfigError(f"keypoint count mismatch: {kp_ref.num_kp} vs {kp_drv.num_kp}")
    b, k, _ = kp_ref.value.shape
    grid = make_coordinate_grid(h, w, kp_ref.value.dtype, kp_ref.value.device).view(1, 1, h, w, 2)
    coords = grid - kp_drv.value.view(b, k, 1, 1, 2)
    if kp_ref.jacobian is not None and kp_drv.jacobian is not None:
        jac = kp_ref.jacobian @ torch.inverse(kp_drv.jacobian)
        coords = (jac.view(b, k, 1, 1, 2, 2) @ coords.unsqueeze(-1)).squeeze(-1)
    drv_to_ref = coords + kp_ref.value.view(b, k, 1, 1, 2)
    return torch.cat([grid.expand(b, 1, h, w, 2), drv_to_ref], dim=1)


class DenseMotionNetwork(nn.Module):
    """Blends sparse keypoint motions into one dense flow and predicts occlusion."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.num_kp
        self.hourglass = Hourglass(
            cfg.dm_block_expansion, (k + 1) * (cfg.num_channels + 1), cfg.dm_num_blocks, cfg.dm_max_features
        )
        self.mask = nn.Conv2d(self.hourglass.out_filters, k + 1, kernel_size=7, padding=3)
        self.occlusion = nn.Conv2d(self.hourglass.out_filters, 1, kernel_size=7, padding=3)
        self.down = AntiAliasInterpolation2d(cfg.num_channels, cfg.dm_scale_factor)

    def heatmap_representation(self, kp_ref, kp_drv, spatial_size):
        heat = keypoints_to_gaussian(kp_drv.value, spatial_size, self.cfg.kp_variance) - keypoints_to_gaussian(
            kp_ref.value, spatial_size, self.cfg.kp_variance
        )
        zeros = heat.new_zeros(heat.shape[0], 1, *spatial_size)
        return torch.cat([zeros, heat], dim=1).unsqueeze(2)

    def forward(self, ref_image: torch.Tensor, kp_ref: KeypointSet, kp_drv: KeypointSet) -> MotionField:
        image = self.down(ref_image)
        b, c, h, w = image.shape
        k = self.cfg.num_kp
        motions = sparse_motions(kp_ref, kp_drv, h, w)
        repeated = image.unsqueeze(1).expand(b, k + 1, c, h, w).reshape(b * (k + 1), c, h, w)
        deformed = sample(repeated, motions.reshape(b * (k + 1), h, w, 2)).view(b, k + 1, c, h, w)

        heat = self.heatmap_representation(kp_ref, kp_drv, (h, w))
        prediction = self.hourglass(torch.cat([heat, deformed], dim=2).view(b, -1, h, w))
        mask = F.softmax(self.mask(prediction), dim=1)
        flow = (motions * mask.unsqueeze(-1)).sum(dim=1)
        occlusion = torch.sigmoid(self.occlusion(prediction))

        size = self.cfg.feature_size
        if (h, w) != (size, size):
            flow = F.interpolate(flow.permute(0, 3, 1, 2), size=(size, size), mode="bilinear", align_corners=True)
            flow = flow.permute(0, 2, 3, 1)
            occlusion = F.interpolate(occlusion, size=(size, size), mode="bilinear", align_corners=True)
        return MotionField(flow=flow, occlusion=occlusion, mask=mask, sparse_motion=motions)
