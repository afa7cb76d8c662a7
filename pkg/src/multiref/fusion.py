"""Softmax-weighted fusion of K warped reference features.

Two granularities are supported.  In ``patch`` mode one shared convolution
maps every warped feature to a single-channel logit map, so each spatial
location receives one weight per reference.  In ``element`` mode the shared
convolution emits C channels and every (channel, location) pair gets its own
weight.  Weights are a softmax across references, hence the fused feature is a
convex combination of the inputs at every element.

All reductions across the reference axis are computed over values sorted
along that axis, which makes the result bit-identical under any permutation of
the references.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import FUSION_MODES, ConfigError
from .model.motion import WarpedFeature

NORMALIZATION_TOLERANCE = 1e-4


class FusionContractError(ValueError):
    """Masks handed to :func:`fuse` are not normalized across references."""


def stack_warped(warped: Sequence[WarpedFeature] | torch.Tensor) -> torch.Tensor:
    """Stack a list of warped features into (B, K, C, H', W')."""
    if isinstance(warped, torch.Tensor):
        if warped.dim() != 5:
            raise ValueError(f"expected (B, K, C, H', W'), got {tuple(warped.shape)}")
        return warped
    if len(warped) == 0:
        raise ValueError("at least one warped feature is required")
    datas = [w.data if isinstance(w, WarpedFeature) else w for w in warped]
    shape = datas[0].shape
    for d in datas[1:]:
        if d.shape != shape:
            raise ValueError(f"warped features must share one shape, got {tuple(shape)} and {tuple(d.shape)}")
    return torch.stack(datas, dim=1)


def _sorted_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    # summation order fixed by value, not by reference position
    return torch.sort(x, dim=dim).values.sum(dim=dim)


class FusionUnit(nn.Module):
    """Shared-weight mask head; one convolution applied to each reference independently."""

    def __init__(self, channels: int, mode: str = "patch", kernel_size: int = 7):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.channels = channels
        out = 1 if mode == "patch" else channels
        self.conv = nn.Conv2d(channels, out, kernel_size=kernel_size, padding=kernel_size // 2)

    def compute_mask_logits(self, warped) -> torch.Tensor:
        stacked = stack_warped(warped)
        b, k, c, h, w = stacked.shape
        if c != self.channels:
            raise ValueError(f"fusion unit expects {self.channels} channels, got {c}")
        # one call per reference keeps each map independent of its slot (bit-exact permutations)
        return torch.stack([self.conv(stacked[:, i]) for i in range(k)], dim=1)

    def forward(self, warped, return_masks: bool = False):
        stacked = stack_warped(warped)
        masks = normalize_masks(self.compute_mask_logits(stacked))
        fused = fuse(stacked, masks)
        return (fused, masks) if return_masks else fused


def compute_mask_logits(warped, unit: FusionUnit) -> torch.Tensor:
    """Mask logits (B, K, M, H', W'); M = 1 for patch mode, C for element mode."""
    return unit.compute_mask_logits(warped)


def normalize_masks(logits: torch.Tensor) -> torch.Tensor:
    """Softmax across the reference axis (dim 1) with max subtraction."""
    shifted = logits - logits.max(dim=1, keepdim=True).values
    e = torch.exp(shifted)
    return e / _sorted_sum(e, dim=1).unsqueeze(1)


def check_normalized(masks: torch.Tensor, tol: float = NORMALIZATION_TOLERANCE) -> None:
    dev = (masks.sum(dim=1) - 1).abs().max().item() if masks.numel() else 0.0
    if not dev <= tol:
        raise FusionContractError(f"mask weights deviate from a unit sum by {dev:.3g} (> {tol})")


def fuse(warped, masks: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """Weighted sum over references: (B, K, C, H', W') x (B, K, M, H', W') -> (B, C, H', W')."""
    stacked = stack_warped(warped)
    if masks.dim() != 5 or masks.shape[:2] != stacked.shape[:2] or masks.shape[3:] != stacked.shape[3:]:
        raise ValueError(f"mask shape {tuple(masks.shape)} incompatible with features {tuple(stacked.shape)}")
    if masks.shape[2] not in (1, stacked.shape[2]):
        raise ValueError("mask channel count must be 1 (patch) or C (element)")
    if validate:
        check_normalized(masks)
    return _sorted_sum(masks * stacked, dim=1)


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().clamp(0, 1).permute(1, 2, 0).cpu().double().numpy()
    return np.round(arr * 255).astype(np.uint8)


def mask_visualization_grid(
    warped,
    masks: torch.Tensor,
    decoder,
    driving: torch.Tensor | None = None,
    references: torch.Tensor | None = None,
) -> np.ndarray:
    """Assemble the per-reference mask grid for one sample as an (rows*H, cols*W, 3) uint8 array.

    Row 0 (only if ``driving`` and ``references`` are given): the driving
    frame followed by each reference.  Next row: the decoder applied to each
    warped feature on its own.  Last row: the decoder applied to each warped
    feature after multiplying by its mask.  Column 0 of the two lower rows is
    left blank so columns line up with the header.
    """
    stacked = stack_warped(warped)
    if stacked.shape[0] != 1:
        raise ValueError("visualization expects a single sample (B = 1)")
    k = stacked.shape[1]
    with torch.no_grad():
        decoded = [decoder(stacked[:, i]) for i in range(k)]
        masked = [decoder(masks[:, i] * stacked[:, i]) for i in range(k)]
    h, w = decoded[0].shape[2:]
    blank = np.full((h, w, 3), 255, dtype=np.uint8)
    rows = []
    if driving is not None and references is not None:
        rows.append([_to_uint8(driving[0])] + [_to_uint8(references[0, i]) for i in range(k)])
    rows.append([blank] + [_to_uint8(d[0]) for d in decoded])
    rows.append([blank] + [_to_uint8(m[0]) for m in masked])
    return np.concatenate([np.concatenate(r, axis=1) for r in rows], axis=0)


def visualize_masks(warped, masks, decoder, out_path: str | Path, driving=None, references=None,
                    export_masks: str | Path | None = None) -> np.ndarray:
    """Write the mask grid as a PNG and optionally the raw masks as ``.npy``."""
    import imageio.v3 as iio

    grid = mask_visualization_grid(warped, masks, decoder, driving, references)
    iio.imwrite(out_path, grid)
    if export_masks is not None:
        np.save(export_masks, masks.detach().cpu().numpy())
    return grid
