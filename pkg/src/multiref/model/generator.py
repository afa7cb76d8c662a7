"""Encoder, decoder and the full multi-reference reenactment network."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from ..config import ConfigError, ModelConfig
from ..fusion import FusionUnit
from .blocks import DownBlock2d, ResBlock2d, SameBlock2d, UpBlock2d
from .keypoints import KeypointSet, KPDetector
from .motion import DenseMotionNetwork, MotionField, WarpedFeature, warp_feature


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.first = SameBlock2d(cfg.num_channels, cfg.block_expansion, kernel_size=7, padding=3)
        blocks = []
        for i in range(cfg.num_down_blocks):
            in_f = min(cfg.max_features, cfg.block_expansion * 2**i)
            out_f = min(cfg.max_features, cfg.block_expansion * 2 ** (i + 1))
            blocks.append(DownBlock2d(in_f, out_f))
        self.down_blocks = nn.ModuleList(blocks)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        res = self.cfg.resolution
        if image.dim() != 4 or image.shape[1:] != (self.cfg.num_channels, res, res):
            raise ConfigError(f"expected images of shape (B, 3, {res}, {res}), got {tuple(image.shape)}")
        out = self.first(image)
        for block in self.down_blocks:
            out = block(out)
        return out


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.feature_channels
        self.bottleneck = nn.Sequential(*[ResBlock2d(c) for _ in range(cfg.num_bottleneck_blocks)])
        blocks = []
        for i in reversed(range(cfg.num_down_blocks)):
            in_f = min(cfg.max_features, cfg.block_expansion * 2 ** (i + 1))
            out_f = min(cfg.max_features, cfg.block_expansion * 2**i)
            blocks.append(UpBlock2d(in_f, out_f))
        self.up_blocks = nn.ModuleList(blocks)
        self.final = nn.Conv2d(cfg.block_expansion, cfg.num_channels, kernel_size=7, padding=3)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.feature_channels, self.cfg.feature_size, self.cfg.feature_size)
        if feature.dim() != 4 or tuple(feature.shape[1:]) != expected:
            raise ConfigError(f"decoder expects (B, {expected}), got {tuple(feature.shape)}")
        out = self.bottleneck(feature)
        for block in self.up_blocks:
            out = block(out)
        return torch.sigmoid(self.final(out))


class ReenactmentModel(nn.Module):
    """Keypoint-driven generator that accepts any number of reference frames.

    ``forward(references, driving)`` takes references shaped (B, K, 3, H, W)
    and driving frames (B, 3, H, W).  K is a runtime dimension: the same
    weights serve K = 1 and K > 1.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.kp_detector = KPDetector(cfg)
        self.dense_motion = DenseMotionNetwork(cfg)
        self.encoder = Encoder(cfg)
        self.fusion = FusionUnit(cfg.feature_channels, cfg.fusion_mode, cfg.fusion_kernel_size)
        self.decoder = Decoder(cfg)

    @property
    def fusion_mode(self) -> str:
        return self.cfg.fusion_mode

    def detect_keypoints(self, image: torch.Tensor) -> KeypointSet:
        return self.kp_detector(image)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.encoder(image)

    def estimate_motion(self, kp_ref: KeypointSet, kp_drv: KeypointSet, ref_image: torch.Tensor) -> MotionField:
        if kp_ref.num_kp != kp_drv.num_kp:
            raise ConfigError(f"keypoint count mismatch: {kp_ref.num_kp} vs {kp_drv.num_kp}")
        return self.dense_motion(ref_image, kp_ref, kp_drv)

    def decode(self, fused: torch.Tensor) -> torch.Tensor:
        return self.decoder(fused)

    def forward(self, references: torch.Tensor, driving: torch.Tensor, kp_driving: KeypointSet | None = None,
                return_internals: bool = False):
        if references.dim() == 4:
            references = references.unsqueeze(1)
        if references.dim() != 5 or references.shape[1] < 1:
            raise ValueError("references must be (B, K, 3, H, W) with K >= 1")
        b, k = references.shape[:2]
        if kp_driving is None:
            kp_driving = self.detect_keypoints(driving)
        # per-reference passes with a fixed batch shape, so results do not depend on reference order
        kp_list, motions, warped_list = [], [], []
        for i in range(k):
            ref = references[:, i]
            kp_i = self.detect_keypoints(ref)
            motion_i = self.estimate_motion(kp_i, kp_driving, ref)
            warped_list.append(warp_feature(self.encode(ref), motion_i).data)
            kp_list.append(kp_i)
            motions.append(motion_i)
        warped = torch.stack(warped_list, dim=1)
        kp_ref = _stack_keypoints(kp_list)
        motion = _stack_motion(motions)
        fused, masks = self.fusion(warped, return_masks=True)
        prediction = self.decode(fused)
        if not return_internals:
            return prediction
        return {
            "prediction": prediction,
            "kp_references": kp_ref,
            "kp_driving": kp_driving,
            "motion": motion,
            "warped": [WarpedFeature(warped[:, i], i) for i in range(k)],
            "masks": masks,
            "fused": fused,
        }


def _interleave(tensors):
    # (B, ...) per reference -> (B*K, ...) in batch-major order
    return torch.stack(tensors, dim=1).flatten(0, 1)


def _stack_keypoints(kps) -> KeypointSet:
    jac = None if kps[0].jacobian is None else _interleave([kp.jacobian for kp in kps])
    return KeypointSet(_interleave([kp.value for kp in kps]), jac)


def _stack_motion(motions) -> MotionField:
    def cat(name):
        vals = [getattr(m, name) for m in motions]
        return None if vals[0] is None else _interleave(vals)

    return MotionField(cat("flow"), cat("occlusion"), cat("mask"), cat("sparse_motion"))


def reenact(model: ReenactmentModel, refs: Sequence[torch.Tensor], driving: torch.Tensor,
            mode: str | None = None) -> torch.Tensor:
    """Animate the reference images (each (3, H, W)) with one or more driving frames.

    ``driving`` may be a single frame (3, H, W) or a stack (T, 3, H, W); the
    output has the same leading shape.
    """
    if len(refs) == 0:
        raise ValueError("at least one reference image is required")
    if mode is not None and mode != model.fusion_mode:
        raise ConfigError(f"model was built with fusion mode {model.fusion_mode!r}, not {mode!r}")
    single = driving.dim() == 3
    drv = driving.unsqueeze(0) if single else driving
    ref_stack = torch.stack(list(refs), dim=0).unsqueeze(0).expand(drv.shape[0], -1, -1, -1, -1)
    with torch.no_grad():
        out = model(ref_stack, drv)
    return out[0] if single else out
