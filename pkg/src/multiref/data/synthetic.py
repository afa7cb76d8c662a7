"""Synthetic head-movement dataset with exact angle annotations.

Each subject is a textured sphere ("head") with eyes, brows, nose, mouth,
hair and two side patches whose colours differ between the left and right
side, so that turning the head reveals content not visible from the front.
Frames are rendered by orthographic ray casting: a pixel on the visible
hemisphere is rotated back into the head frame and the texture is evaluated
there, which gives true out-of-plane rotation for yaw and pitch and in-plane
rotation for roll.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import VideoDataset, VideoSequence
from .tracks import AXES, AngleTrack

DEFAULT_PROGRAM: tuple[tuple[str, float, float], ...] = (
    ("yaw", -60.0, 60.0),
    ("pitch", -60.0, 60.0),
    ("roll", -60.0, 60.0),
)


@dataclass
class SyntheticSpec:
    subjects: int = 5
    frames_per_sequence: int = 61
    angle_program: tuple[tuple[str, float, float], ...] = DEFAULT_PROGRAM
    resolution: int = 64
    seed: int = 0
    illumination_variants: int = 2
    # subjects (0-based) rendered under the first illumination only
    single_illumination_subjects: tuple[int, ...] = (4,)
    supersample: int = 2
    expression_phase: float = 0.0
    expression_amplitude: float = 0.5

    def __post_init__(self):
        self.angle_program = tuple((str(a), float(s), float(e)) for a, s, e in self.angle_program)
        self.single_illumination_subjects = tuple(self.single_illumination_subjects)
        for axis, start, end in self.angle_program:
            if axis not in AXES:
                raise ValueError(f"unknown axis {axis!r}")
            if not (-90 <= start <= 90 and -90 <= end <= 90):
                raise ValueError("angle endpoints must lie within [-90, 90]")
        if self.subjects < 1 or self.frames_per_sequence < 1 or self.illumination_variants < 1:
            raise ValueError("subjects, frames_per_sequence and illumination_variants must be positive")
        if self.resolution < 8 or self.supersample < 1:
            raise ValueError("resolution must be >= 8 and supersample >= 1")

    def patterns(self) -> list[tuple[int, int]]:
        out = []
        for s in range(self.subjects):
            n_illum = 1 if s in self.single_illumination_subjects else self.illumination_variants
            out.extend((s, i) for i in range(n_illum))
        return out


@dataclass
class Appearance:
    radius: float
    skin: np.ndarray
    hair: np.ndarray
    hairline: float
    iris: np.ndarray
    lips: np.ndarray
    brow: np.ndarray
    left_patch: np.ndarray
    right_patch: np.ndarray
    eye_sep: float
    eye_height: float
    mouth_width: float
    stripe_freq: float
    background: np.ndarray = field(default_factory=lambda: np.array([0.18, 0.2, 0.24]))


def subject_appearance(seed: int, subject: int) -> Appearance:
    rng = np.random.default_rng([seed, subject, 7919])
    hue = rng.uniform(0, 1, size=6)

    def colour(h, sat=0.7, val=0.85):
        k = (np.array([5.0, 3.0, 1.0]) + h * 6) % 6
        return val - val * sat * np.clip(np.minimum(k, 4 - k), 0, 1)

    return Appearance(
        radius=rng.uniform(0.66, 0.76),
        skin=np.array([0.93, 0.76, 0.62]) * rng.uniform(0.7, 1.0) + rng.uniform(-0.05, 0.05, 3),
        hair=colour(hue[0], 0.6, rng.uniform(0.15, 0.6)),
        hairline=rng.uniform(0.45, 0.65),
        iris=colour(hue[1], 0.8, 0.6),
        lips=colour(0.95 + 0.1 * hue[2], 0.6, 0.75),
        brow=colour(hue[3], 0.5, 0.25),
        left_patch=colour(hue[4], 0.9, 0.95),
        right_patch=colour((hue[4] + 0.5) % 1.0, 0.9, 0.95),
        eye_sep=rng.uniform(0.33, 0.45),
        eye_height=rng.uniform(0.12, 0.22),
        mouth_width=rng.uniform(0.25, 0.38),
        stripe_freq=rng.uniform(6.0, 12.0),
    )


def illumination_params(index: int) -> tuple[np.ndarray, np.ndarray]:
    """(light direction, colour gain) for an illumination variant."""
    presets = [
        (np.array([-0.35, 0.4, 1.0]), np.array([1.0, 1.0, 1.0])),
        (np.array([0.55, 0.2, 0.9]), np.array([1.08, 0.95, 0.78]) * 0.85),
        (np.array([0.0, -0.3, 1.0]), np.array([0.85, 0.92, 1.1]) * 0.9),
    ]
    light, gain = presets[index % len(presets)]
    return light / np.linalg.norm(light), gain


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Head-to-camera rotation Rz(roll) @ Rx(pitch) @ Ry(yaw) for angles in degrees.

    Positive yaw turns the face towards image right, positive pitch tilts it
    up and positive roll rotates it counter-clockwise in the image.
    """
    y, p, r = (math.radians(v) for v in (yaw, pitch, roll))
    ry = np.array([[math.cos(y), 0, math.sin(y)], [0, 1, 0], [-math.sin(y), 0, math.cos(y)]])
    rx = np.array([[1, 0, 0], [0, math.cos(p), math.sin(p)], [0, -math.sin(p), math.cos(p)]])
    rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
    return rz @ rx @ ry


def _blob(theta, phi, t0, p0, rt, rp):
    d = ((theta - t0) / rt) ** 2 + ((phi - p0) / rp) ** 2
    return np.clip(1.5 - 1.5 * d, 0.0, 1.0)


def _texture(app: Appearance, theta, phi, mouth_open: float) -> np.ndarray:
    n = theta.shape
    col = np.broadcast_to(app.skin, n + (3,)).copy()

    def paint(weight, rgb):
        nonlocal col
        col = col * (1 - weight[..., None]) + weight[..., None] * rgb

    # side patches with subject-specific stripes
    for side, rgb in ((-1, app.left_patch), (1, app.right_patch)):
        w = _blob(theta, phi, side * 1.3, -0.05, 0.42, 0.5)
        stripes = 0.5 + 0.5 * np.sin(app.stripe_freq * phi + side * 2.0)
        paint(w, rgb * (0.55 + 0.45 * stripes[..., None]))
    for side in (-1, 1):
        paint(_blob(theta, phi, side * app.eye_sep, app.eye_height + 0.17, 0.15, 0.045), app.brow)
        paint(_blob(theta, phi, side * app.eye_sep, app.eye_height, 0.13, 0.08), np.array([0.97, 0.97, 0.95]))
        paint(_blob(theta, phi, side * app.eye_sep, app.eye_height, 0.06, 0.065), app.iris)
        paint(_blob(theta, phi, side * app.eye_sep, app.eye_height, 0.025, 0.03), np.array([0.05, 0.05, 0.05]))
    paint(_blob(theta, phi, 0.0, -0.08, 0.07, 0.12), app.skin * 0.72)
    paint(_blob(theta, phi, 0.0, -0.36, app.mouth_width, 0.05 + 0.06 * mouth_open), app.lips)
    paint(_blob(theta, phi, 0.0, -0.36, app.mouth_width * 0.7, 0.01 + 0.05 * mouth_open), np.array([0.25, 0.05, 0.08]))
    hair = np.clip((phi - app.hairline) * 12.0, 0, 1) + np.clip((np.abs(theta) - 2.3) * 6.0, 0, 1)
    paint(np.clip(hair, 0, 1), app.hair)
    return col


def render_frame(app: Appearance, yaw: float, pitch: float, roll: float, resolution: int,
                 illumination: int = 0, mouth_open: float = 0.0, supersample: int = 2) -> np.ndarray:
    """Render one (resolution, resolution, 3) uint8 frame."""
    n = resolution * supersample
    coords = (np.arange(n) + 0.5) / n * 2 - 1
    x = coords[None, :].repeat(n, 0)
    y = -coords[:, None].repeat(n, 1)
    r = app.radius
    rho2 = (x**2 + y**2) / r**2
    inside = rho2 < 1.0
    z = np.sqrt(np.clip(1.0 - rho2, 0, None))
    cam = np.stack([x / r, y / r, z], axis=-1)  # unit normals on the visible hemisphere

    rot = rotation_matrix(yaw, pitch, roll)
    head = cam @ rot  # row-vector form of rot.T @ p
    theta = np.arctan2(head[..., 0], head[..., 2])
    phi = np.arcsin(np.clip(head[..., 1], -1, 1))

    light, gain = illumination_params(illumination)
    shade = 0.45 + 0.55 * np.clip(cam @ light, 0, 1)
    face = _texture(app, theta, phi, mouth_open) * shade[..., None] * gain

    bg = np.broadcast_to(app.background * gain, (n, n, 3))
    # soft silhouette edge
    alpha = np.clip((1.0 - np.sqrt(rho2)) * r * n / 2, 0, 1) * inside
    img = face * alpha[..., None] + bg * (1 - alpha[..., None])
    img = img.reshape(resolution, supersample, resolution, supersample, 3).mean(axis=(1, 3))
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def angle_schedule(axis: str, start: float, end: float, frames: int) -> np.ndarray:
    """(frames, 3) angles interpolating ``axis`` linearly from start to end inclusive."""
    angles = np.zeros((frames, 3))
    if frames == 1:
        values = np.array([start])
    else:
        values = start + (end - start) * np.arange(frames) / (frames - 1)
    angles[:, AXES.index(axis)] = values
    return angles


def pattern_name(subject: int, illumination: int) -> str:
    return f"subject{subject:02d}_illum{illumination}"


def generate_synthetic(spec: SyntheticSpec) -> VideoDataset:
    """Render every (subject, illumination) pattern over the angle program."""
    sequences = []
    for subject, illum in spec.patterns():
        app = subject_appearance(spec.seed, subject)
        axis_names = [a for a, _, _ in spec.angle_program]
        for j, (axis, start, end) in enumerate(spec.angle_program):
            name = axis if axis_names.count(axis) == 1 else f"{axis}_{j}"
            angles = angle_schedule(axis, start, end, spec.frames_per_sequence)
            t = np.arange(spec.frames_per_sequence)
            mouth = spec.expression_amplitude * (0.5 + 0.5 * np.sin(0.35 * t + spec.expression_phase + subject))
            frames = np.stack([
                render_frame(app, *a, spec.resolution, illum, m, spec.supersample) for a, m in zip(angles, mouth)
            ])
            sequences.append(VideoSequence(
                name=name, frames_uint8=frames, subject=f"subject{subject:02d}",
                illumination=f"illum{illum}", axis=axis, track=AngleTrack(angles),
                pattern=pattern_name(subject, illum),
            ))
    return VideoDataset(sequences)


def write_synthetic(spec: SyntheticSpec, root) -> VideoDataset:
    ds = generate_synthetic(spec)
    ds.write(root)
    return ds
