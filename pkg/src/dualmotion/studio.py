"""Inference modes for trained adapter sets, plus the latent-geometry probe."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .lora import AdapterSet, inject, make_adapter_set
from .schedule import NoiseSchedule, sample
from .text import PromptSpec
from .trainer import TrainConfig, _adamw, spatial_loss


def _seeds(seed) -> list[int]:
    return [int(seed)] if isinstance(seed, (int, np.integer)) else [int(s) for s in seed]


def generate(base, prompt: PromptSpec, sets: Sequence[AdapterSet], scales: dict[str, float], *,
             seeds, frames: int, resolution: int, schedule: NoiseSchedule, steps: int = 30,
             guidance_scale: float = 12.0) -> torch.Tensor:
    """Sample one clip per seed with ``sets`` injected at ``scales[kind]``; zero-scale sets are skipped."""
    seeds = _seeds(seeds)
    active = [s for s in sets if scales.get(s.kind, 1.0) != 0.0]
    shape = (len(seeds), frames, resolution, resolution, base.config.in_channels)
    was_training = base.training
    base.eval()
    try:
        if not active:
            return sample(base, prompt, shape, seeds, schedule, steps, guidance_scale)
        with inject(base, active, trainable=(), scales=scales):
            return sample(base, prompt, shape, seeds, schedule, steps, guidance_scale)
    finally:
        base.train(was_training)


def _require_kind(aset: AdapterSet, kind: str) -> None:
    if aset.kind != kind:
        raise ValueError(f"expected a {kind} adapter set, got {aset.kind}")


def customize_motion(base, temporal_set: AdapterSet, prompt: PromptSpec, gamma_t: float = 1.0, *,
                     seeds=0, frames: int = 8, resolution: int = 32, schedule: NoiseSchedule,
                     steps: int = 30, guidance_scale: float = 12.0) -> torch.Tensor:
    """Generate with the learned motion only: temporal adapters at ``gamma_t``, no spatial adapters."""
    _require_kind(temporal_set, "temporal")
    return generate(base, prompt, [temporal_set], {"temporal": gamma_t}, seeds=seeds, frames=frames,
                    resolution=resolution, schedule=schedule, steps=steps, guidance_scale=guidance_scale)


def mix_videos(base, spatial_set: AdapterSet, temporal_set: AdapterSet, gamma_s: float, gamma_t: float,
               prompt: PromptSpec, *, seeds=0, frames: int = 8, resolution: int = 32,
               schedule: NoiseSchedule, steps: int = 30, guidance_scale: float = 12.0) -> torch.Tensor:
    """Appearance from one source's spatial set, motion from another's temporal set."""
    _require_kind(spatial_set, "spatial")
    _require_kind(temporal_set, "temporal")
    overlap = set(spatial_set.adapters) & set(temporal_set.adapters)
    if overlap:
        raise ValueError(f"adapter sets overlap on {sorted(overlap)}")
    return generate(base, prompt, [spatial_set, temporal_set], {"spatial": gamma_s, "temporal": gamma_t},
                    seeds=seeds, frames=frames, resolution=resolution, schedule=schedule, steps=steps,
                    guidance_scale=guidance_scale)


def train_spatial_on_image(base, image: torch.Tensor, prompt: PromptSpec, config: TrainConfig,
                           schedule: NoiseSchedule, steps: int, source_id: str = "image") -> AdapterSet:
    """Spatial path alone on a single (h, w, c) image treated as a one-frame clip."""
    cfg = base.config
    if tuple(image.shape) != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ValueError(f"image shape {tuple(image.shape)} does not match model resolution {cfg.image_size}")
    sset = make_adapter_set(base, "spatial", config.rank, seed=config.seed, source_id=source_id,
                            dropout=config.dropout)
    if steps <= 0:
        return sset
    dtype = next(base.parameters()).dtype
    clip = image.to(dtype)[None, None]
    opt = _adamw(sset.parameters(), config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = torch.Generator().manual_seed(config.seed)
        base.train()
        try:
            with inject(base, [sset], trainable=[sset]):
                for _ in range(steps):
                    loss = spatial_loss(base, clip, prompt, schedule, gen)
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
        finally:
            base.eval()
    return sset


def animate_image(base, image: torch.Tensor, temporal_set: AdapterSet, config: TrainConfig,
                  prompt: PromptSpec, *, train_steps: int | None = None, gamma_s: float = 1.0,
                  gamma_t: float = 1.0, seeds=0, frames: int = 8, schedule: NoiseSchedule,
                  steps: int = 30, guidance_scale: float = 12.0) -> torch.Tensor:
    """Fit spatial adapters to the image, then mix them with the learned motion."""
    _require_kind(temporal_set, "temporal")
    n = config.steps_single_video if train_steps is None else train_steps
    sset = train_spatial_on_image(base, image, prompt, config, schedule, n)
    return mix_videos(base, sset, temporal_set, gamma_s, gamma_t, prompt, seeds=seeds, frames=frames,
                      resolution=image.shape[0], schedule=schedule, steps=steps,
                      guidance_scale=guidance_scale)


# -- latent geometry probe --------------------------------------------------------

def _pca2(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2]
    # fix the sign ambiguity so projections are reproducible
    signs = np.sign(basis[np.arange(basis.shape[0]), np.abs(basis).argmax(1)])
    basis = basis * signs[:, None]
    coords = centered @ basis.T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords


def _geometry(sets: np.ndarray) -> dict:
    """sets: (clips, frames, dim) point clouds."""
    n, f, _ = sets.shape
    coords = _pca2(sets.reshape(n * f, -1)).reshape(n, f, 2)
    centroids = sets.mean(1)
    dist = np.linalg.norm(centroids[:, None] - centroids[None], axis=-1)
    diffs = np.diff(sets, axis=1)
    norms = np.linalg.norm(diffs, axis=-1)
    turns = []
    for d in diffs:
        a, b = d[:-1], d[1:]
        den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
        turns.append(np.where(den > 0, (a * b).sum(-1) / np.where(den > 0, den, 1), 1.0))
    return {"coords": coords, "centroid_distances": dist, "diff_vectors": diffs,
            "step_lengths": norms, "turn_cosines": np.array(turns)}


@dataclass
class ProbeReport:
    t_grid: list[int]
    beta: float
    anchor: int
    labels: list[str]
    before: list[dict] = field(default_factory=list)
    after: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(g):
            return {"coords": g["coords"].round(9).tolist(),
                    "centroid_distances": g["centroid_distances"].round(9).tolist(),
                    "step_lengths": g["step_lengths"].round(9).tolist(),
                    "turn_cosines": g["turn_cosines"].round(9).tolist()}
        return {"t_grid": self.t_grid, "beta": self.beta, "anchor": self.anchor, "labels": self.labels,
                "before": [clean(g) for g in self.before], "after": [clean(g) for g in self.after]}


def probe_latents(clips: Sequence[torch.Tensor], t_grid: Sequence[int], beta: float,
                  schedule: NoiseSchedule, *, labels: Sequence[str] | None = None, seed: int = 0,
                  anchor: int | None = None) -> ProbeReport:
    """Frame-point geometry of noised clips before and after the debias transform.

    One Gaussian noise frame, drawn from ``seed``, is shared by every frame of every clip so
    that differences between latents come only from the clean content. ``t = 0`` means clean.
    """
    if len(clips) < 2:
        raise ValueError("the probe needs at least two clips")
    z0 = np.stack([c.detach().cpu().double().numpy() for c in clips])  # (n, f, h, w, c)
    n, f = z0.shape[:2]
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(z0.shape[2:])
    if anchor is None:
        anchor = int(rng.integers(f))
    if not 0 <= anchor < f:
        raise ValueError("anchor outside the frame range")
    scale = np.sqrt(beta * beta + 1)
    report = ProbeReport([int(t) for t in t_grid], float(beta), anchor,
                         list(labels) if labels else [f"clip{i}" for i in range(n)])
    for t in t_grid:
        ab = schedule.alpha_bar(int(t))
        z = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
        pts = z.reshape(n, f, -1)
        deb = scale * pts - beta * pts[:, anchor:anchor + 1]
        report.before.append(_geometry(pts))
        report.after.append(_geometry(deb))
    return report
