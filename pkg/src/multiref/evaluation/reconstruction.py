"""Self-reenactment scoring: L1D, AKD, AED and the pseudo multi-reference baseline.

Every sequence is regenerated frame by frame from a few of its own frames
used as references.  Landmark (AKD) and identity-embedding (AED) extractors
are injected callables mapping a (T, 3, H, W) tensor to per-frame arrays;
rows containing NaN mark failed detections.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..model.generator import ReenactmentModel

Landmarker = Callable[[torch.Tensor], np.ndarray]  # (T, 3, H, W) -> (T, L, 2) pixels
Embedder = Callable[[torch.Tensor], np.ndarray]  # (T, 3, H, W) -> (T, D)

STRATEGIES = ("first-mid-last", "first")


def reference_indices(length: int, strategy: str = "first-mid-last") -> list[int]:
    """Frame indices used as references, in (first, last, middle) order."""
    if length < 1:
        raise ValueError("sequence must contain at least one frame")
    if strategy == "first":
        return [0]
    if strategy == "first-mid-last":
        return [0, length - 1, (length - 1) // 2]
    raise ValueError(f"unknown reference strategy {strategy!r}")


def select_references(seq, strategy: str = "first-mid-last") -> list[torch.Tensor]:
    frames = seq.tensor() if hasattr(seq, "tensor") else seq
    return [frames[i] for i in reference_indices(len(frames), strategy)]


def _check_pair(real, gen):
    if real.shape[0] != gen.shape[0]:
        raise ValueError(f"sequence lengths differ: {real.shape[0]} vs {gen.shape[0]}")
    if real.shape != gen.shape:
        raise ValueError(f"sequence shapes differ: {tuple(real.shape)} vs {tuple(gen.shape)}")


def frame_l1(real: torch.Tensor, gen: torch.Tensor) -> torch.Tensor:
    """Per-frame mean absolute difference, shape (T,)."""
    _check_pair(real, gen)
    return (real.double() - gen.double()).abs().flatten(1).mean(dim=1)


def l1_distance(real: torch.Tensor, gen: torch.Tensor) -> float:
    """Mean absolute pixel difference over all frames, channels and pixels."""
    _check_pair(real, gen)
    return float((real.double() - gen.double()).abs().mean())


def _paired_mean_distance(a: np.ndarray, b: np.ndarray) -> tuple[float | None, int]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"extractor outputs differ in shape: {a.shape} vs {b.shape}")
    flat_a, flat_b = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
    ok = np.isfinite(flat_a).all(axis=1) & np.isfinite(flat_b).all(axis=1)
    skipped = int((~ok).sum())
    if not ok.any():
        return None, skipped
    return ok, skipped


def average_keypoint_distance(real: torch.Tensor, gen: torch.Tensor, landmarker: Landmarker | None):
    """(AKD, skipped frames): mean landmark displacement, averaged per frame then over frames.

    Returns ``(None, 0)`` when no landmarker is available.
    """
    if landmarker is None:
        return None, 0
    _check_pair(real, gen)
    la, lb = np.asarray(landmarker(real), np.float64), np.asarray(landmarker(gen), np.float64)
    ok, skipped = _paired_mean_distance(la, lb)
    if ok is None:
        return None, skipped
    per_frame = np.linalg.norm(la[ok] - lb[ok], axis=-1).mean(axis=-1)
    return float(per_frame.mean()), skipped


def average_euclidean_distance(real: torch.Tensor, gen: torch.Tensor, embedder: Embedder | None):
    """(AED, skipped frames): mean L2 distance between per-frame embeddings."""
    if embedder is None:
        return None, 0
    _check_pair(real, gen)
    ea, eb = np.asarray(embedder(real), np.float64), np.asarray(embedder(gen), np.float64)
    ea, eb = ea.reshape(ea.shape[0], -1), eb.reshape(eb.shape[0], -1)
    ok, skipped = _paired_mean_distance(ea, eb)
    if ok is None:
        return None, skipped
    return float(np.linalg.norm(ea[ok] - eb[ok], axis=1).mean()), skipped


class ModelKeypointLandmarker:
    """Uses a trained keypoint detector as the landmark extractor (pixel units)."""

    def __init__(self, model: ReenactmentModel, batch_size: int = 64):
        self.model = model
        self.batch_size = batch_size

    def __call__(self, frames: torch.Tensor) -> np.ndarray:
        outs = []
        with torch.no_grad():
            for chunk in frames.split(self.batch_size):
                outs.append(self.model.detect_keypoints(chunk).value)
        kp = torch.cat(outs).double().numpy()
        h, w = frames.shape[2:]
        return np.stack([(kp[..., 0] + 1) / 2 * (w - 1), (kp[..., 1] + 1) / 2 * (h - 1)], axis=-1)


class PooledPixelEmbedder:
    """Identity proxy: colour thumbnail of the frame, flattened."""

    def __init__(self, size: int = 8):
        self.size = size

    def __call__(self, frames: torch.Tensor) -> np.ndarray:
        pooled = torch.nn.functional.adaptive_avg_pool2d(frames.double(), self.size)
        return pooled.flatten(1).numpy()


def generate_sequence(model: ReenactmentModel, refs: Sequence[torch.Tensor], driving: torch.Tensor,
                      batch_size: int = 32) -> torch.Tensor:
    """Animate ``refs`` with every frame of ``driving`` (T, 3, H, W)."""
    if len(refs) == 0:
        raise ValueError("at least one reference image is required")
    ref_stack = torch.stack(list(refs)).unsqueeze(0)
    outs = []
    model.eval()
    with torch.no_grad():
        for chunk in driving.split(batch_size):
            outs.append(model(ref_stack.expand(chunk.shape[0], -1, -1, -1, -1), chunk))
    return torch.cat(outs)


def pseudo_multi_ref(model_single: ReenactmentModel, refs: Sequence[torch.Tensor], driving: torch.Tensor,
                     batch_size: int = 32) -> tuple[torch.Tensor, np.ndarray]:
    """Run the single-reference model once per reference and keep, per frame,
    the candidate with the smallest L1 distance to the true frame.

    Ties go to the lowest reference index.  Returns (sequence, chosen index per frame).
    """
    candidates = torch.stack([generate_sequence(model_single, [r], driving, batch_size) for r in refs])
    errors = torch.stack([frame_l1(driving, c) for c in candidates])  # (K, T)
    chosen = torch.argmin(errors, dim=0)  # first minimum on ties
    best = candidates[chosen, torch.arange(driving.shape[0])]
    return best, chosen.numpy()


@dataclass
class SequenceScore:
    name: str
    l1d: float
    akd: float | None = None
    aed: float | None = None
    akd_skipped: int = 0
    aed_skipped: int = 0
    reference_indices: list[int] = field(default_factory=list)


@dataclass
class ReconReport:
    """Per-sequence and averaged L1D / AKD / AED."""

    mode: str
    strategy: str
    sequences: list[SequenceScore]

    @property
    def count(self) -> int:
        return len(self.sequences)

    def _mean(self, attr) -> float | None:
        vals = [getattr(s, attr) for s in self.sequences if getattr(s, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def l1d(self) -> float | None:
        return self._mean("l1d")

    @property
    def akd(self) -> float | None:
        return self._mean("akd")

    @property
    def aed(self) -> float | None:
        return self._mean("aed")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "strategy": self.strategy,
            "count": self.count,
            "summary": {"L1D": self.l1d, "AKD": self.akd, "AED": self.aed},
            "sequences": [asdict(s) for s in self.sequences],
        }

    def to_text(self) -> str:
        def fmt(v):
            return "absent" if v is None else f"{v:.6f}"

        lines = [f"# reconstruction mode={self.mode} refs={self.strategy} n={self.count}",
                 f"{'sequence':<32} {'L1D':>10} {'AKD':>10} {'AED':>10}"]
        for s in self.sequences:
            lines.append(f"{s.name:<32} {fmt(s.l1d):>10} {fmt(s.akd):>10} {fmt(s.aed):>10}")
        lines.append(f"{'mean':<32} {fmt(self.l1d):>10} {fmt(self.akd):>10} {fmt(self.aed):>10}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict(), indent=1))
        else:
            path.write_text(self.to_text())


def reconstruct(model: ReenactmentModel, driving: torch.Tensor, mode: str, strategy: str):
    """Generate one sequence under an evaluation mode; returns (sequence, reference indices)."""
    idx = reference_indices(driving.shape[0], strategy)
    refs = [driving[i] for i in idx]
    if mode == "pseudo":
        gen, _ = pseudo_multi_ref(model, refs, driving)
    elif mode == "single":
        idx = idx[:1]
        gen = generate_sequence(model, refs[:1], driving)
    elif mode in ("patch", "element"):
        if model.fusion_mode != mode:
            raise ValueError(f"checkpoint fusion mode is {model.fusion_mode!r}, not {mode!r}")
        gen = generate_sequence(model, refs, driving)
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    return gen, idx


def evaluate_reconstruction(model: ReenactmentModel, dataset, mode: str = "patch",
                            strategy: str = "first-mid-last", landmarker: Landmarker | None = None,
                            embedder: Embedder | None = None) -> ReconReport:
    scores = []
    for seq in dataset:
        real = seq.tensor()
        gen, idx = reconstruct(model, real, mode, strategy)
        akd, akd_skip = average_keypoint_distance(real, gen, landmarker)
        aed, aed_skip = average_euclidean_distance(real, gen, embedder)
        name = f"{seq.pattern}/{seq.name}" if getattr(seq, "pattern", "") else seq.name
        scores.append(SequenceScore(name, l1_distance(real, gen), akd, aed, akd_skip, aed_skip, list(idx)))
    return ReconReport(mode, strategy, scores)
