"""Frame-folder video datasets.

Two on-disk layouts are understood:

``patterns``
    ``<root>/<pattern>/<sequence>/frame_%06d.png`` with an optional
    ``track.csv`` next to the frames and an optional ``pattern.json``
    (``{"subject": ..., "illumination": ...}``) in each pattern folder.
``flat``
    ``<root>/<video>/*.png`` -- one folder of numbered frames per video.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .tracks import AngleTrack, read_track_csv, write_track_csv

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SEQUENCE_AXES = ("yaw", "pitch", "roll", "free")


class DatasetError(RuntimeError):
    pass


def _frame_key(path: Path):
    nums = re.findall(r"\d+", path.stem)
    return (int(nums[-1]) if nums else -1, path.name)


def list_frames(folder: Path) -> list[Path]:
    files = [p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()]
    return sorted(files, key=_frame_key)


def read_frame(path: Path) -> np.ndarray:
    import imageio.v3 as iio

    img = iio.imread(path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[2] == 4:
        img = img[..., :3]
    if img.dtype != np.uint8:
        raise DatasetError(f"{path}: expected 8-bit image, got {img.dtype}")
    return img


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(T, H, W, 3) uint8 -> (T, 3, H, W) float32 in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2).float().div_(255.0)


def tensor_to_frames(t: torch.Tensor) -> np.ndarray:
    """(T, 3, H, W) in [0, 1] -> (T, H, W, 3) uint8."""
    arr = t.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


@dataclass(eq=False)
class VideoSequence:
    """Ordered frames of one subject, optionally annotated with head angles."""

    name: str
    frames_uint8: np.ndarray | None = None
    paths: list[Path] | None = None
    subject: str = ""
    illumination: str = ""
    axis: str = "free"
    track: AngleTrack | None = None
    pattern: str = ""
    _cache: torch.Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.frames_uint8 is None and not self.paths:
            raise DatasetError(f"sequence {self.name!r} has no frames")
        if self.axis not in SEQUENCE_AXES:
            raise DatasetError(f"unknown axis tag {self.axis!r}")
        if self.track is not None and len(self.track) != len(self):
            raise DatasetError(f"sequence {self.name!r}: track has {len(self.track)} rows for {len(self)} frames")

    def __len__(self) -> int:
        return len(self.frames_uint8) if self.frames_uint8 is not None else len(self.paths)

    def load(self) -> np.ndarray:
        if self.frames_uint8 is None:
            frames = [read_frame(p) for p in self.paths]
            if len({f.shape for f in frames}) != 1:
                raise DatasetError(f"sequence {self.name!r}: frames differ in resolution")
            self.frames_uint8 = np.stack(frames)
        return self.frames_uint8

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.load().shape[1:3])

    def tensor(self) -> torch.Tensor:
        if self._cache is None:
            self._cache = frames_to_tensor(self.load())
        return self._cache

    def frame(self, i: int) -> torch.Tensor:
        return self.tensor()[i]

    def write(self, folder: str | Path) -> None:
        import imageio.v3 as iio

        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.load()):
            iio.imwrite(folder / f"frame_{i:06d}.png", img)
        if self.track is not None:
            write_track_csv(folder / "track.csv", self.track)


class VideoDataset(Sequence[VideoSequence]):
    def __init__(self, sequences: list[VideoSequence]):
        self.sequences = list(sequences)

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def __iter__(self) -> Iterator[VideoSequence]:
        return iter(self.sequences)

    def patterns(self) -> dict[str, list[VideoSequence]]:
        out: dict[str, list[VideoSequence]] = {}
        for s in self.sequences:
            out.setdefault(s.pattern or s.name, []).append(s)
        return out

    def find(self, pattern: str, axis: str) -> VideoSequence:
        for s in self.sequences:
            if s.pattern == pattern and s.axis == axis:
                return s
        raise KeyError(f"no {axis!r} sequence for pattern {pattern!r}")

    def write(self, root: str | Path) -> None:
        root = Path(root)
        for s in self.sequences:
            pattern = s.pattern or s.name
            seq_dir = root / pattern / s.name if s.pattern else root / s.name
            s.write(seq_dir)
            if s.pattern:
                meta = root / pattern / "pattern.json"
                meta.write_text(json.dumps({"subject": s.subject, "illumination": s.illumination}, indent=1))


def _load_sequence(folder: Path, pattern: str, meta: dict) -> VideoSequence | None:
    paths = list_frames(folder)
    if not paths:
        return None
    track = None
    if (folder / "track.csv").exists():
        track = read_track_csv(folder / "track.csv")
    prefix = folder.name.split("_")[0]
    axis = prefix if prefix in SEQUENCE_AXES else "free"
    seq = VideoSequence(
        name=folder.name, paths=paths, subject=str(meta.get("subject", pattern or folder.name)),
        illumination=str(meta.get("illumination", "")), axis=axis, track=track, pattern=pattern,
    )
    try:
        seq.load()
    except Exception as exc:  # unreadable frames drop the whole sequence
        log.warning("skipping %s: %s", folder, exc)
        return None
    return seq


def detect_layout(root: Path) -> str:
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        if list_frames(child):
            return "flat"
        if any(d.is_dir() and list_frames(d) for d in child.iterdir()):
            return "patterns"
    raise DatasetError(f"{root}: no frame folders found")


def load_dataset(root: str | Path, layout: str = "auto") -> VideoDataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    if layout == "auto":
        layout = detect_layout(root)
    sequences: list[VideoSequence] = []
    if layout == "flat":
        for folder in sorted(p for p in root.iterdir() if p.is_dir()):
            seq = _load_sequence(folder, "", {})
            if seq is not None:
                sequences.append(seq)
    elif layout == "patterns":
        for pdir in sorted(p for p in root.iterdir() if p.is_dir()):
            meta_path = pdir / "pattern.json"
            meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
            for sdir in sorted(p for p in pdir.iterdir() if p.is_dir()):
                seq = _load_sequence(sdir, pdir.name, meta)
                if seq is not None:
                    sequences.append(seq)
    else:
        raise DatasetError(f"unknown layout {layout!r}")
    if not sequences:
        raise DatasetError(f"{root}: dataset is empty")
    return VideoDataset(sequences)
