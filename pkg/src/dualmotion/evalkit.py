"""Analytic motion and appearance metrics for the synthetic domain.

The renderer's ground truth makes these exact oracles on clean clips; on generated clips
they play the role that perception-model scores play for natural video.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import torch

from .synthvid import PALETTE, SHAPES, SceneSpec, render_video, trajectory_offsets

FOREGROUND_THRESHOLD = 0.1  # fraction of the [-1, 1] dynamic range
ZERO_MOTION_PX = 0.5
MOTION_PASS = 0.7


def _frames(video) -> np.ndarray:
    v = video.detach().cpu().double().numpy() if isinstance(video, torch.Tensor) else np.asarray(video, float)
    if v.ndim == 5:
        if v.shape[0] != 1:
            raise ValueError("expected a single clip")
        v = v[0]
    if v.ndim != 4:
        raise ValueError(f"expected (f, h, w, c), got shape {v.shape}")
    return v


def foreground_weights(video, threshold: float = FOREGROUND_THRESHOLD) -> np.ndarray:
    """Per-pixel deviation from each frame's median colour, zeroed below the threshold. Shape (f, h, w)."""
    v = _frames(video)
    median = np.median(v.reshape(v.shape[0], -1, v.shape[-1]), axis=1)
    dev = np.abs(v - median[:, None, None, :]).max(axis=-1)
    return np.where(dev > threshold * 2.0, dev, 0.0)


def centroid_track(video, threshold: float = FOREGROUND_THRESHOLD) -> np.ndarray:
    """Intensity-weighted foreground centroid (x, y) per frame; rows are NaN where no foreground."""
    w = foreground_weights(video, threshold)
    f, h, wd = w.shape
    xs = np.arange(wd) + 0.5
    ys = np.arange(h) + 0.5
    out = np.full((f, 2), np.nan)
    for k in range(f):
        total = w[k].sum()
        if total > 0:
            out[k] = (w[k].sum(0) @ xs / total, w[k].sum(1) @ ys / total)
    return out


def track_missing(track: np.ndarray) -> np.ndarray:
    return np.isnan(track).any(axis=1)


def net_displacement(video) -> np.ndarray:
    """(dx, dy) between the first and last frame; NaN if either centroid is missing."""
    tr = centroid_track(video)
    return tr[-1] - tr[0]


def direction_sign(video, axis: int = 0) -> int:
    d = net_displacement(video)[axis]
    if np.isnan(d):
        return 0
    return int(np.sign(d)) if abs(d) >= ZERO_MOTION_PX else 0


def is_zero_motion(video) -> bool:
    disp = np.diff(centroid_track(video), axis=0)
    return bool(np.linalg.norm(disp) < ZERO_MOTION_PX)


def motion_fidelity(gen, ref_motion: str) -> float:
    """Cosine between per-frame displacement sequences of ``gen`` and the canonical trajectory, mapped to [0, 1].

    NaN when centroids are missing; 0.5 when the clip does not move (see ``is_zero_motion``).
    """
    track = centroid_track(gen)
    if track_missing(track).any():
        return float("nan")
    disp = np.diff(track, axis=0).ravel()
    ref = np.diff(trajectory_offsets(ref_motion, 1.0, track.shape[0]), axis=0).ravel()
    if np.linalg.norm(disp) < ZERO_MOTION_PX or np.linalg.norm(ref) == 0:
        return 0.5
    cos = float(disp @ ref / (np.linalg.norm(disp) * np.linalg.norm(ref)))
    return min(max((cos + 1) / 2, 0.0), 1.0)


# -- appearance -------------------------------------------------------------------

_PALETTE_HUES = {name: colorsys.rgb_to_hsv(*rgb)[0] for name, rgb in PALETTE.items()}


def mean_foreground_color(video, threshold: float = FOREGROUND_THRESHOLD) -> np.ndarray | None:
    v = _frames(video)
    w = foreground_weights(v, threshold)
    total = w.sum()
    if total <= 0:
        return None
    return (v * w[..., None]).reshape(-1, v.shape[-1]).sum(0) / total


def dominant_hue(video, threshold: float = FOREGROUND_THRESHOLD) -> str | None:
    """Palette colour nearest in hue to the weighted mean foreground colour; None if degenerate."""
    rgb = mean_foreground_color(video, threshold)
    if rgb is None:
        return None
    rgb01 = np.clip((rgb + 1) / 2, 0, 1)
    hue, sat, _ = colorsys.rgb_to_hsv(*rgb01)
    if sat < 1e-3:
        return None
    dist = {n: min(abs(hue - h), 1 - abs(hue - h)) for n, h in _PALETTE_HUES.items()}
    return min(dist, key=dist.get)


_MOMENT_ORDERS = ((2, 0), (0, 2), (1, 1), (3, 0), (0, 3), (2, 1), (1, 2), (4, 0), (0, 4), (2, 2))


def normalized_moments(mask: np.ndarray) -> np.ndarray | None:
    """Scale- and translation-invariant central moments of a 2-D weight map."""
    m00 = mask.sum()
    if m00 <= 0:
        return None
    ys, xs = np.mgrid[0:mask.shape[0], 0:mask.shape[1]] + 0.5
    cx, cy = (mask * xs).sum() / m00, (mask * ys).sum() / m00
    dx, dy = xs - cx, ys - cy
    return np.array([(mask * dx ** p * dy ** q).sum() / m00 ** (1 + (p + q) / 2) for p, q in _MOMENT_ORDERS])


@lru_cache(maxsize=None)
def _templates() -> dict[str, np.ndarray]:
    out = {}
    for shape in SHAPES:
        spec = SceneSpec(shape=shape, color="red", size=0.25, speed=0.0, start=(64.0, 64.0))
        frame = render_video(spec, frames=1, resolution=128)
        out[shape] = normalized_moments(foreground_weights(frame)[0] > 0)
    return out


def shape_distances(video, threshold: float = FOREGROUND_THRESHOLD) -> dict[str, float] | None:
    """Relative moment distance to each shape template, averaged over frames with foreground."""
    masks = foreground_weights(video, threshold) > 0
    feats = [m for m in (normalized_moments(k.astype(float)) for k in masks) if m is not None]
    if not feats:
        return None
    feat = np.mean(feats, axis=0)
    return {s: float(np.linalg.norm(feat - t) / np.linalg.norm(t)) for s, t in _templates().items()}


def classify_shape(video) -> str | None:
    d = shape_distances(video)
    return None if d is None else min(d, key=d.get)


class AppearanceScore(NamedTuple):
    hue_match: bool
    shape_match_score: float


def appearance_score(gen, target_color: str, target_shape: str, temperature: float = 0.1) -> AppearanceScore:
    """Hue match against the palette and a [0, 1] shape score (softmin weight of the target template).

    A clip with no foreground scores ``(False, nan)``.
    """
    if target_color not in PALETTE or target_shape not in SHAPES:
        raise ValueError("unknown target colour or shape")
    hue = dominant_hue(gen)
    d = shape_distances(gen)
    if hue is None or d is None:
        return AppearanceScore(False, float("nan"))
    logits = np.array([-d[s] / temperature for s in SHAPES])
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return AppearanceScore(hue == target_color, float(p[SHAPES.index(target_shape)]))


def temporal_consistency(video) -> float:
    """Mean normalized cross-correlation of adjacent frames, clamped to [0, 1]."""
    v = _frames(video)
    if v.shape[0] < 2:
        raise ValueError("temporal consistency needs at least two frames")
    scores = []
    for a, b in zip(v[:-1], v[1:]):
        a = a.ravel() - a.mean()
        b = b.ravel() - b.mean()
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            scores.append(1.0 if na == nb else 0.0)
        else:
            scores.append(float(np.clip(a @ b / (na * nb), 0.0, 1.0)))
    return float(np.mean(scores))


# -- run evaluation ---------------------------------------------------------------

@dataclass
class EvalProtocol:
    prompts: list[dict] = field(default_factory=lambda: [{"text": "a blue circle", "color": "blue", "shape": "circle"}])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    ref_motion: str = "slide_right"
    gamma_temporal: float = 1.0
    gamma_spatial: float = 1.0
    steps: int = 30
    guidance_scale: float = 12.0
    arms: tuple[str, ...] = ("dual", "coupled")
    motion_threshold: float = MOTION_PASS
    # frozen from the pilot run; see the README section on the acceptance protocol
    min_motion_pass: int = 8
    min_hue_pass: int = 8


def clip_metrics(video, protocol: EvalProtocol, prompt: dict) -> dict:
    fid = motion_fidelity(video, protocol.ref_motion)
    disp = net_displacement(video)
    hue = dominant_hue(video)
    app = appearance_score(video, prompt["color"], prompt["shape"])
    positive = bool(np.isfinite(disp[0]) and disp[0] > 0)
    return {
        "hue": hue or "none",
        "hue_match": bool(app.hue_match),
        "shape_score": app.shape_match_score,
        "fidelity": fid,
        "dx": float(disp[0]),
        "dy": float(disp[1]),
        "positive_x": positive,
        "motion_pass": bool(positive and np.isfinite(fid) and fid >= protocol.motion_threshold),
        "temporal_consistency": temporal_consistency(video),
    }


def summarize(rows: list[dict]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for arm in sorted({r["arm"] for r in rows}):
        sub = [r for r in rows if r["arm"] == arm]
        fid = [r["fidelity"] for r in sub if np.isfinite(r["fidelity"])]
        out[arm] = {
            "n": len(sub),
            "hue_match_rate": float(np.mean([r["hue_match"] for r in sub])),
            "motion_pass_rate": float(np.mean([r["motion_pass"] for r in sub])),
            "positive_x_rate": float(np.mean([r["positive_x"] for r in sub])),
            "mean_fidelity": float(np.mean(fid)) if fid else float("nan"),
            "mean_temporal_consistency": float(np.mean([r["temporal_consistency"] for r in sub])),
        }
    return out


def evaluate_run(base, run, protocol: EvalProtocol, schedule, coupled=None) -> dict:
    """Sample every (arm, prompt, seed) and tabulate metrics.

    Arms: ``base`` (no adapters), ``dual`` (the run's temporal set only) and ``coupled``
    (every adapter of a jointly tuned baseline run, trained from the same clips if not given).
    """
    from .studio import customize_motion, generate
    from .trainer import clips_from_meta, train_coupled
    from .text import tokenize

    rows: list[dict] = []
    if not protocol.seeds or not protocol.prompts:
        return {"rows": rows, "summary": {}}
    if "coupled" in protocol.arms and coupled is None:
        coupled = train_coupled(base, clips_from_meta(run.clips), run.config, schedule)
    frames = run.clips[0]["frames"] if run.clips else base.config.num_frames
    res = run.clips[0]["resolution"] if run.clips else base.config.image_size
    for arm in protocol.arms:
        for pr in protocol.prompts:
            prompt = tokenize(pr["text"])
            kw = dict(seeds=protocol.seeds, frames=frames, resolution=res, schedule=schedule,
                      steps=protocol.steps, guidance_scale=protocol.guidance_scale)
            if arm == "base":
                videos = generate(base, prompt, [], {}, **kw)
            elif arm == "dual":
                videos = customize_motion(base, run.temporal_set, prompt, protocol.gamma_temporal, **kw)
            elif arm == "coupled":
                sets = list(coupled.spatial_sets.values()) + [coupled.temporal_set]
                scales = {"spatial": protocol.gamma_spatial, "temporal": protocol.gamma_temporal}
                videos = generate(base, prompt, sets, scales, **kw)
            else:
                raise ValueError(f"unknown arm {arm!r}")
            for seed, video in zip(protocol.seeds, videos):
                rows.append({"arm": arm, "prompt": pr["text"], "seed": int(seed),
                             **clip_metrics(video, protocol, pr)})
    return {"rows": rows, "summary": summarize(rows)}
