"""Procedural moving-shape clips with independently controlled appearance and motion.

Coordinates are in pixels with x to the right and y downward; pixel ``(row, col)``
covers ``[col, col + 1) x [row, row + 1)``, so a pixel centre sits at ``col + 0.5``.
Values are mapped from RGB in [0, 1] to [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .text import COLOR_WORDS, PromptSpec, tokenize

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "yellow": (1.0, 1.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "blue": (0.0, 0.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
assert tuple(PALETTE) == COLOR_WORDS

SHAPES = ("square", "circle", "triangle")
TRAJECTORIES = ("slide_right", "slide_left", "slide_up", "arc", "zigzag", "forward_then_left")
BACKGROUNDS = ("plain", "gradient")

MOTION_PHRASES = {
    "slide_right": "sliding right",
    "slide_left": "sliding left",
    "slide_up": "sliding up",
    "arc": "moving in an arc",
    "zigzag": "moving in a zigzag",
    "forward_then_left": "moving forward then turning left",
}

PLAIN_GRAY = 0.2
SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "square"
    color: str = "red"
    size: float = 0.25
    trajectory: str = "slide_right"
    speed: float = 2.0
    camera_pan: float = 0.0
    background: str = "plain"
    seed: int = 0
    # (x, y) of the object centroid at frame 0; drawn from ``seed`` when None
    start: tuple[float, float] | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise ValueError(f"unknown color {self.color!r}")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if not 0.0 < self.size < 1.0:
            raise ValueError("size must be a fraction of the frame in (0, 1)")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")

    @property
    def rgb(self) -> tuple[float, float, float]:
        return PALETTE[self.color]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["start"] = None if self.start is None else [float(v) for v in self.start]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        if d.get("start") is not None:
            d["start"] = tuple(float(v) for v in d["start"])
        return cls(**d)


class Clip(NamedTuple):
    video: torch.Tensor  # (f, h, w, c)
    prompt: PromptSpec
    source_id: str
    spec: SceneSpec


class ContainmentError(ValueError):
    def __init__(self, frame: int, message: str):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame


def trajectory_offsets(trajectory: str, speed: float, frames: int) -> np.ndarray:
    """Object displacement from its frame-0 position, shape (frames, 2)."""
    k = np.arange(frames, dtype=np.float64)
    s = float(speed)
    if trajectory == "slide_right":
        xy = np.stack([s * k, 0 * k], 1)
    elif trajectory == "slide_left":
        xy = np.stack([-s * k, 0 * k], 1)
    elif trajectory == "slide_up":
        xy = np.stack([0 * k, -s * k], 1)
    elif trajectory == "arc":
        # half circle over the top, travelling left to right; arc length per frame ~ speed
        theta = math.pi * k / max(frames - 1, 1)
        r = s * max(frames - 1, 1) / math.pi
        xy = np.stack([r * (1 - np.cos(theta)), -r * np.sin(theta)], 1)
    elif trajectory == "zigzag":
        wave = np.array([0.0, 1.0, 0.0, -1.0])[np.arange(frames) % 4]
        xy = np.stack([s * wave, -s * k], 1)
    elif trajectory == "forward_then_left":
        turn = (frames - 1) // 2
        fwd = np.minimum(k, turn)
        side = np.maximum(k - turn, 0)
        xy = np.stack([-s * side, -s * fwd], 1)
    else:
        raise ValueError(f"unknown trajectory {trajectory!r}")
    return xy


def _half_extents(shape: str, half: float) -> tuple[float, float, float, float]:
    """(left, right, top, bottom) reach of the shape from its area centroid."""
    if shape == "triangle":
        return half, half, 4 * half / 3, 2 * half / 3
    return half, half, half, half


def _frame_positions(spec: SceneSpec, frames: int, resolution: int) -> np.ndarray:
    """In-frame centroid per frame, including camera pan; validates containment."""
    off = trajectory_offsets(spec.trajectory, spec.speed, frames)
    off[:, 0] -= spec.camera_pan * np.arange(frames)
    half = spec.size * resolution / 2
    left, right, top, bottom = _half_extents(spec.shape, half)
    lo = np.array([left - off[:, 0].min(), top - off[:, 1].min()])
    hi = np.array([resolution - right - off[:, 0].max(), resolution - bottom - off[:, 1].max()])
    if spec.start is None:
        if np.any(lo > hi):
            axis = int(np.argmax(lo - hi))
            frame = int(np.argmax(off[:, axis])) if axis == 0 else int(np.argmax(off[:, 1]))
            raise ContainmentError(frame, f"trajectory {spec.trajectory!r} spans more than the frame")
        rng = np.random.default_rng(spec.seed)
        start = lo + rng.uniform(0.0, 1.0, size=2) * (hi - lo)
    else:
        start = np.asarray(spec.start, dtype=np.float64)
    pos = start[None, :] + off
    lo_ok = (pos[:, 0] - left >= 0) & (pos[:, 1] - top >= 0)
    hi_ok = (pos[:, 0] + right <= resolution) & (pos[:, 1] + bottom <= resolution)
    bad = np.flatnonzero(~(lo_ok & hi_ok))
    if bad.size:
        raise ContainmentError(int(bad[0]), "object leaves the frame")
    return pos


def object_track(spec: SceneSpec, frames: int, resolution: int) -> np.ndarray:
    """Analytic in-frame centroid positions, shape (frames, 2)."""
    return _frame_positions(spec, frames, resolution)


def _coverage(shape: str, cx: float, cy: float, half: float, resolution: int) -> np.ndarray:
    n = resolution * SUPERSAMPLE
    sub = (np.arange(n) + 0.5) / SUPERSAMPLE
    x = sub[None, :] - cx
    y = sub[:, None] - cy
    if shape == "square":
        inside = (np.abs(x) <= half) & (np.abs(y) <= half)
    elif shape == "circle":
        inside = x * x + y * y <= half * half
    else:
        height = 2 * half
        apex = -2 * height / 3
        frac = (y - apex) / height
        inside = (y <= height / 3) & (frac >= 0) & (np.abs(x) <= frac * half)
    cov = inside.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))
    return cov


def _background(kind: str, shift: float, resolution: int) -> np.ndarray:
    if kind == "plain":
        return np.full((resolution, resolution), PLAIN_GRAY)
    xw = np.arange(resolution) + 0.5 + shift
    # stays within the foreground threshold of its own median so it never reads as object
    row = PLAIN_GRAY - 0.05 + 0.05 * (1 - np.cos(2 * math.pi * xw / resolution))
    return np.broadcast_to(row, (resolution, resolution)).copy()


def render_video(spec: SceneSpec, frames: int = 8, resolution: int = 32) -> torch.Tensor:
    """Rasterize a clip with supersampled anti-aliasing. Returns (f, h, w, 3) float32 in [-1, 1]."""
    if frames < 1 or resolution < 1:
        raise ValueError("frames and resolution must be positive")
    pos = _frame_positions(spec, frames, resolution)
    half = spec.size * resolution / 2
    color = np.asarray(spec.rgb)
    out = np.empty((frames, resolution, resolution, 3))
    for k in range(frames):
        bg = _background(spec.background, spec.camera_pan * k, resolution)[..., None]
        cov = _coverage(spec.shape, pos[k, 0], pos[k, 1], half, resolution)[..., None]
        out[k] = bg * (1 - cov) + color * cov
    return torch.from_numpy((out * 2 - 1).astype(np.float32))


def coverage_centroids(spec: SceneSpec, frames: int = 8, resolution: int = 32) -> np.ndarray:
    """Centroid of the rasterized coverage mask per frame (the renderer's own ground truth)."""
    pos = _frame_positions(spec, frames, resolution)
    half = spec.size * resolution / 2
    centers = np.arange(resolution) + 0.5
    out = np.empty((frames, 2))
    for k in range(frames):
        cov = _coverage(spec.shape, pos[k, 0], pos[k, 1], half, resolution)
        total = cov.sum()
        out[k] = (cov.sum(0) @ centers / total, cov.sum(1) @ centers / total)
    return out


def make_prompt(spec: SceneSpec, with_motion: bool = True) -> PromptSpec:
    """``a <color> <shape> <motion phrase>``; the motion phrase is dropped when ``with_motion`` is False."""
    text = f"a {spec.color} {spec.shape}"
    if with_motion:
        text += " " + MOTION_PHRASES[spec.trajectory]
    return tokenize(text)


def make_dataset(
    motion: str,
    n_videos: int,
    appearance_pool: list[tuple[str, str]],
    seed: int,
    frames: int = 8,
    resolution: int = 32,
    speed: float = 2.0,
    speed_jitter: float = 0.0,
    size: float = 0.25,
    with_motion_prompt: bool = True,
) -> list[Clip]:
    """Clips sharing one motion class with (color, shape) appearances drawn from the pool."""
    if n_videos < 1:
        raise ValueError("n_videos must be >= 1")
    if not appearance_pool:
        raise ValueError("appearance pool is empty")
    rng = np.random.default_rng(seed)
    replace_draw = n_videos > len(appearance_pool)
    picks = rng.choice(len(appearance_pool), size=n_videos, replace=replace_draw)
    clips = []
    for i, p in enumerate(picks):
        color, shape = appearance_pool[int(p)]
        jitter = rng.uniform(-speed_jitter, speed_jitter) if speed_jitter > 0 else 0.0
        spec = SceneSpec(
            shape=shape, color=color, size=size, trajectory=motion,
            speed=speed + jitter, seed=int(rng.integers(2**31)),
        )
        video = render_video(spec, frames, resolution)
        source_id = f"{motion}-{i:03d}-{color}-{shape}"
        clips.append(Clip(video, make_prompt(spec, with_motion_prompt), source_id, spec))
    return clips


def clip_from_spec(spec: SceneSpec, frames: int = 8, resolution: int = 32,
                   source_id: str | None = None, with_motion_prompt: bool = True) -> Clip:
    sid = source_id or f"{spec.trajectory}-{spec.color}-{spec.shape}-{spec.seed}"
    return Clip(render_video(spec, frames, resolution), make_prompt(spec, with_motion_prompt), sid, spec)


def random_scene(rng: np.random.Generator, gradient_prob: float = 0.2) -> SceneSpec:
    """One draw from the broad pre-training distribution over appearance and motion."""
    return SceneSpec(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLOR_WORDS[rng.integers(len(COLOR_WORDS))],
        size=float(rng.uniform(0.22, 0.3)),
        trajectory=TRAJECTORIES[rng.integers(len(TRAJECTORIES))],
        speed=float(rng.uniform(1.6, 2.4)),
        background="gradient" if rng.random() < gradient_prob else "plain",
        seed=int(rng.integers(2**31)),
    )


def with_color(spec: SceneSpec, color: str) -> SceneSpec:
    return replace(spec, color=color)


def to_uint8(video: torch.Tensor) -> np.ndarray:
    v = video.detach().cpu().double().clamp(-1, 1).numpy()
    return np.round((v + 1) * 127.5).astype(np.uint8)


def save_gif(video: torch.Tensor, path: str | Path, fps: int = 8, upscale: int = 4) -> None:
    """Write an (f, h, w, c) clip as an animated GIF."""
    from PIL import Image

    frames = to_uint8(video)
    if upscale > 1:
        frames = frames.repeat(upscale, axis=1).repeat(upscale, axis=2)
    images = [Image.fromarray(f) for f in frames]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    images[0].save(
        path, save_all=True, append_images=images[1:], duration=int(1000 / fps), loop=0,
        optimize=False,
    )
