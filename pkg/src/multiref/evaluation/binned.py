"""Angle-binned perceptual evaluation for motion transfer.

Generated frames inherit the head angles of the driving frames that produced
them.  Frames of the true and generated sets are grouped into fixed-width,
half-open angle bins along one axis; within a bin each side is summarised by
the arithmetic mean of its raw extractor activations (per layer), and the two
summaries are compared with the LPIPS aggregation.  Bins lacking either side
are ignored, and the score is the unweighted mean over the remaining bins.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..data.tracks import AXES, AngleTrack
from .extractors import FeatureExtractor

log = logging.getLogger(__name__)

LPIPS_EPS = 1e-10


@dataclass(frozen=True)
class BinSpec:
    axis: str = "yaw"
    lo: float = -60.0
    hi: float = 60.0
    width: float = 2.0

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        if not self.width > 0:
            raise ValueError("bin width must be positive")
        n = (self.hi - self.lo) / self.width
        if not n >= 1 or abs(n - round(n)) > 1e-9:
            raise ValueError("(hi - lo) must be a positive multiple of width")

    @property
    def num_bins(self) -> int:
        return round((self.hi - self.lo) / self.width)

    def edges(self, i: int) -> tuple[float, float]:
        return self.lo + i * self.width, self.lo + (i + 1) * self.width


@dataclass
class BinAssignment:
    spec: BinSpec
    bins: list[list[int]]
    unassigned: list[int]

    def bin_of(self) -> dict[int, int]:
        return {f: b for b, frames in enumerate(self.bins) for f in frames}


def annotate_results(driving_track: AngleTrack, result_seq, index_map: Sequence[int] | None = None) -> AngleTrack:
    """Angles for generated frames: frame j inherits driving frame ``index_map[j]`` (default j)."""
    n = len(result_seq)
    if index_map is None:
        if len(driving_track) != n:
            raise ValueError(f"driving track has {len(driving_track)} frames, result has {n}")
        return AngleTrack(driving_track.angles.copy())
    if len(index_map) != n:
        raise ValueError("index map length must equal the number of result frames")
    return driving_track.take(index_map)


def assign_bins(track: AngleTrack, spec: BinSpec) -> BinAssignment:
    """Frame with angle a goes to bin floor((a - lo) / width) when lo <= a < hi."""
    angles = track.axis(spec.axis) if len(track) else np.zeros(0)
    idx = np.floor((angles - spec.lo) / spec.width).astype(np.int64)
    # snap rounding at bin edges onto the interval definition
    lower = spec.lo + idx * spec.width
    idx = np.where(angles < lower, idx - 1, idx)
    idx = np.where(angles >= spec.lo + (idx + 1) * spec.width, idx + 1, idx)
    inside = (angles >= spec.lo) & (angles < spec.hi)
    idx = np.clip(idx, 0, spec.num_bins - 1)
    bins: list[list[int]] = [[] for _ in range(spec.num_bins)]
    unassigned = []
    for frame, (b, ok) in enumerate(zip(idx, inside)):
        if ok:
            bins[b].append(frame)
        else:
            unassigned.append(frame)
    return BinAssignment(spec, bins, unassigned)


def representative_feature(images: torch.Tensor, extractor: FeatureExtractor,
                           features: list[torch.Tensor] | None = None) -> list[torch.Tensor]:
    """Per-layer mean of raw activations over N >= 1 images.

    ``features`` may hold precomputed per-layer activations for ``images``.
    """
    n = len(images) if features is None else features[0].shape[0]
    if n == 0:
        raise ValueError("representative feature needs at least one image")
    if features is None:
        features = extractor.extract(images)
    return [f.double().mean(dim=0) for f in features]


def lpips_between(rep_a: list[torch.Tensor], rep_b: list[torch.Tensor], weights: list[torch.Tensor]) -> float:
    """Sum over layers of the spatial mean of channel-weighted squared differences
    between channel-unit-normalized features."""
    if len(rep_a) != len(rep_b) or len(rep_a) != len(weights):
        raise ValueError("representative features and weights must cover the same layers")
    total = 0.0
    for a, b, w in zip(rep_a, rep_b, weights):
        if a.shape != b.shape or a.shape[0] != w.shape[0]:
            raise ValueError(f"layer shape mismatch: {tuple(a.shape)}, {tuple(b.shape)}, weights {w.shape[0]}")
        na = a / (a.pow(2).sum(dim=0, keepdim=True).sqrt() + LPIPS_EPS)
        nb = b / (b.pow(2).sum(dim=0, keepdim=True).sqrt() + LPIPS_EPS)
        d = (w.double().view(-1, 1, 1) * (na - nb) ** 2).sum(dim=0)
        total += float(d.mean())
    return total


@dataclass
class BinRow:
    index: int
    lo: float
    hi: float
    n_true: int
    n_result: int
    distance: float | None


@dataclass
class BinReport:
    spec: BinSpec
    rows: list[BinRow]
    extractor: str = ""

    @property
    def scored(self) -> list[BinRow]:
        return [r for r in self.rows if r.distance is not None]

    @property
    def ignored(self) -> list[int]:
        return [r.index for r in self.rows if r.distance is None]

    @property
    def no_overlap(self) -> bool:
        return not self.scored

    @property
    def aggregate(self) -> float | None:
        scored = self.scored
        return None if not scored else float(np.mean([r.distance for r in scored]))

    def to_dict(self) -> dict:
        return {
            "axis": self.spec.axis, "lo": self.spec.lo, "hi": self.spec.hi, "width": self.spec.width,
            "extractor": self.extractor,
            "aggregate": self.aggregate,
            "status": "no-overlap" if self.no_overlap else "ok",
            "scored_bins": len(self.scored),
            "ignored_bins": self.ignored,
            "bins": [r.__dict__ for r in self.rows],
        }

    def to_text(self) -> str:
        lines = [f"# binned LPIPS axis={self.spec.axis} range=[{self.spec.lo:g}, {self.spec.hi:g}) "
                 f"width={self.spec.width:g} extractor={self.extractor}",
                 f"{'bin':>5} {'lo':>8} {'hi':>8} {'n_true':>7} {'n_result':>9} {'lpips':>12}"]
        for r in self.rows:
            if r.n_true == 0 and r.n_result == 0:
                continue
            d = "ignored" if r.distance is None else f"{r.distance:.6f}"
            lines.append(f"{r.index:>5} {r.lo:>8g} {r.hi:>8g} {r.n_true:>7} {r.n_result:>9} {d:>12}")
        agg = "no-overlap" if self.no_overlap else f"{self.aggregate:.6f}"
        lines.append(f"aggregate ({len(self.scored)} bins): {agg}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) if path.suffix == ".json" else self.to_text())


def binned_score(true_frames: torch.Tensor, true_track: AngleTrack, result_frames: torch.Tensor,
                 result_track: AngleTrack, spec: BinSpec, extractor: FeatureExtractor,
                 true_features: list[torch.Tensor] | None = None,
                 result_features: list[torch.Tensor] | None = None) -> BinReport:
    """Angle-binned representative-feature LPIPS between a true and a generated set."""
    if len(true_frames) != len(true_track) or len(result_frames) != len(result_track):
        raise ValueError("frame and track lengths differ")
    a_true, a_res = assign_bins(true_track, spec), assign_bins(result_track, spec)
    need_true = any(a_true.bins[i] and a_res.bins[i] for i in range(spec.num_bins))
    if true_features is None and need_true:
        true_features = extractor.extract(true_frames)
    if result_features is None and need_true:
        result_features = extractor.extract(result_frames)
    rows = []
    for i in range(spec.num_bins):
        lo, hi = spec.edges(i)
        ti, ri = a_true.bins[i], a_res.bins[i]
        dist = None
        if ti and ri:
            rep_t = representative_feature(None, extractor, [f[ti] for f in true_features])
            rep_r = representative_feature(None, extractor, [f[ri] for f in result_features])
            dist = lpips_between(rep_t, rep_r, extractor.channel_weights)
        rows.append(BinRow(i, lo, hi, len(ti), len(ri), dist))
    return BinReport(spec, rows, getattr(extractor, "name", ""))


# ---------------------------------------------------------------------------
# pairwise motion-transfer protocol

REFERENCE_POLICIES = {
    "frontal-left-right": (0.0, -30.0, 30.0),
    "frontal": (0.0,),
}


def transfer_pairs(patterns: Sequence[tuple[str, str, str]]) -> list[tuple[int, int]]:
    """Ordered (driving, reference) index pairs over ``(name, subject, illumination)``
    patterns, excluding pairs with the same subject under the same illumination."""
    pairs = []
    for i, (_, s_i, l_i) in enumerate(patterns):
        for j, (_, s_j, l_j) in enumerate(patterns):
            if (s_i, l_i) != (s_j, l_j):
                pairs.append((i, j))
    return pairs


def nearest_angle_frames(seq, targets: Sequence[float], axis: str = "yaw", tolerance: float = 1.0) -> list[int]:
    if seq.track is None:
        raise ValueError(f"sequence {seq.name!r} has no angle track")
    values = seq.track.axis(axis)
    picks = []
    for t in targets:
        i = int(np.argmin(np.abs(values - t)))
        if abs(values[i] - t) > tolerance:
            log.warning("%s: no frame at %s=%g, using %g", seq.name, axis, t, values[i])
        picks.append(i)
    return picks


def _reference_sequence(sequences):
    for s in sequences:
        if s.axis == "yaw":
            return s
    return sequences[0]


@dataclass
class PairwiseResult:
    patterns: list[str]
    axes: list[str]
    matrices: dict[str, np.ndarray]  # axis -> (P, P), NaN where excluded or no overlap
    reports: dict[tuple[str, int, int], BinReport] = field(default_factory=dict)

    def mean(self, axis: str, pooling: str = "pair") -> float | None:
        """``pair``: mean of per-pair aggregates.  ``pool``: mean over all scored bins of all pairs."""
        if pooling == "pair":
            vals = self.matrices[axis][np.isfinite(self.matrices[axis])]
            return float(vals.mean()) if vals.size else None
        if pooling == "pool":
            d = [r.distance for (ax, _, _), rep in self.reports.items() if ax == axis for r in rep.scored]
            return float(np.mean(d)) if d else None
        raise ValueError(f"unknown pooling {pooling!r}")

    def to_dict(self) -> dict:
        return {
            "patterns": self.patterns,
            "summary": {ax: self.mean(ax) for ax in self.axes},
            "summary_pooled": {ax: self.mean(ax, "pool") for ax in self.axes},
            "matrices": {ax: [[None if not np.isfinite(v) else float(v) for v in row] for row in m]
                         for ax, m in self.matrices.items()},
        }


def pairwise_evaluation(dataset, model, refs_policy: str = "frontal-left-right", axes=("yaw", "pitch", "roll"),
                        extractor: FeatureExtractor | None = None, lo: float = -60.0, hi: float = 60.0,
                        width: float = 2.0, generate=None) -> PairwiseResult:
    """Transfer every pattern's motion onto every other eligible pattern and score per axis.

    ``generate(model, refs, driving_frames)`` defaults to
    :func:`multiref.evaluation.reconstruction.generate_sequence`.
    """
    from .extractors import IdentityExtractor
    from .reconstruction import generate_sequence

    extractor = extractor or IdentityExtractor()
    generate = generate or generate_sequence
    groups = dataset.patterns()
    names = sorted(groups)
    meta = [(n, groups[n][0].subject, groups[n][0].illumination) for n in names]
    pairs = transfer_pairs(meta)
    if not pairs:
        raise ValueError("motion-transfer evaluation needs at least two eligible patterns")
    targets = REFERENCE_POLICIES[refs_policy]

    ref_frames = {}
    for n in names:
        src = _reference_sequence(groups[n])
        ref_frames[n] = [src.frame(i) for i in nearest_angle_frames(src, targets)]

    by_axis = {n: {s.axis: s for s in groups[n]} for n in names}
    feature_cache: dict[tuple[str, str], list[torch.Tensor]] = {}
    matrices = {ax: np.full((len(names), len(names)), np.nan) for ax in axes}
    reports = {}
    for ax in axes:
        spec = BinSpec(ax, lo, hi, width)
        for i, j in pairs:
            drv_seq, true_seq = by_axis[names[i]].get(ax), by_axis[names[j]].get(ax)
            if drv_seq is None or true_seq is None or drv_seq.track is None or true_seq.track is None:
                continue
            key = (names[j], ax)
            if key not in feature_cache:
                feature_cache[key] = extractor.extract(true_seq.tensor())
            result = generate(model, ref_frames[names[j]], drv_seq.tensor())
            result_track = annotate_results(drv_seq.track, result)
            rep = binned_score(true_seq.tensor(), true_seq.track, result, result_track, spec, extractor,
                               true_features=feature_cache[key])
            reports[(ax, i, j)] = rep
            if not rep.no_overlap:
                matrices[ax][i, j] = rep.aggregate
    return PairwiseResult(names, list(axes), matrices, reports)
