"""Random K-reference training batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from ..config import TrainConfig

log = logging.getLogger(__name__)


class EmptyDatasetError(RuntimeError):
    pass


@dataclass
class Batch:
    references: torch.Tensor  # (B, K, 3, H, W)
    driving: torch.Tensor  # (B, 3, H, W)
    video_index: np.ndarray  # (B,)
    reference_index: np.ndarray  # (B, K)
    driving_index: np.ndarray  # (B,)


def eligible_videos(dataset, K: int) -> list[int]:
    keep = []
    for i, seq in enumerate(dataset):
        if len(seq) >= K + 1:
            keep.append(i)
        else:
            log.warning("skipping %r: %d frames, need at least %d", getattr(seq, "name", i), len(seq), K + 1)
    return keep


def sample_indices(rng: np.random.Generator, eligible: list[int], lengths: list[int], batch_size: int, K: int):
    videos = rng.choice(np.asarray(eligible), size=batch_size, replace=True)
    refs = np.empty((batch_size, K), dtype=np.int64)
    drv = np.empty(batch_size, dtype=np.int64)
    for b, v in enumerate(videos):
        picks = rng.integers(0, lengths[v], size=K + 1)
        refs[b], drv[b] = picks[:K], picks[K]
    return videos, refs, drv


def sample_training_batch(dataset, config: TrainConfig, rng, K: int | None = None) -> Batch:
    """Draw ``config.batch_size`` samples; each picks one video, then K reference
    frames and one driving frame independently and uniformly from it.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("dataset contains no videos")
    K = config.K if K is None else K
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    eligible = eligible_videos(dataset, K)
    if not eligible:
        raise EmptyDatasetError(f"no video has at least {K + 1} frames")
    lengths = [len(s) for s in dataset]
    videos, refs, drv = sample_indices(rng, eligible, lengths, config.batch_size, K)
    ref_imgs = torch.stack([dataset[v].tensor()[torch.from_numpy(r)] for v, r in zip(videos, refs)])
    drv_imgs = torch.stack([dataset[v].tensor()[d] for v, d in zip(videos, drv)])
    return Batch(ref_imgs, drv_imgs, videos, refs, drv)
