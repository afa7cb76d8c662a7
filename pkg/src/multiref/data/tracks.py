"""Per-frame head angle annotations and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AXES = ("yaw", "pitch", "roll")
CSV_HEADER = ("frame", "yaw", "pitch", "roll")


@dataclass
class AngleTrack:
    """Head angles in degrees, one row of (yaw, pitch, roll) per frame."""

    angles: np.ndarray  # (T, 3) float64

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.angles)):
            raise ValueError("angle track contains non-finite values")

    def __len__(self) -> int:
        return self.angles.shape[0]

    def axis(self, name: str) -> np.ndarray:
        return self.angles[:, AXES.index(name)]

    def take(self, index) -> "AngleTrack":
        return AngleTrack(self.angles[np.asarray(index, dtype=int)])

    def __eq__(self, other) -> bool:
        return isinstance(other, AngleTrack) and np.array_equal(self.angles, other.angles)


def write_track_csv(path: str | Path, track: AngleTrack) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for i, (yaw, pitch, roll) in enumerate(track.angles):
            w.writerow([i, f"{yaw:.6f}", f"{pitch:.6f}", f"{roll:.6f}"])


def read_track_csv(path: str | Path) -> AngleTrack:
    """Read ``frame,yaw,pitch,roll``; rows are ordered by the frame column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{line_no}: expected 4 fields")
            rows.append((int(row[0]), float(row[1]), float(row[2]), float(row[3])))
    rows.sort(key=lambda r: r[0])
    frames = [r[0] for r in rows]
    if len(set(frames)) != len(frames):
        raise ValueError(f"{path}: duplicate frame indices")
    return AngleTrack(np.array([r[1:] for r in rows], dtype=np.float64).reshape(-1, 3))
