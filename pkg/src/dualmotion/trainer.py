"""Base pre-training and dual-path adapter customization.

Squared-error losses are averaged over tensor elements; this only rescales the objective.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .archive import dump_json, sanitize
from .lora import AdapterSet, inject, load_adapter_set, make_adapter_set, save_adapter_set
from .schedule import NoiseSchedule, forward_diffuse
from .synthvid import Clip, SceneSpec, clip_from_spec, make_prompt, random_scene, render_video
from .text import PromptSpec, null_prompt, tokenize

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, details: str):
        super().__init__(f"non-finite loss at step {step}: {details}")
        self.step = step


@dataclass
class DebiasConfig:
    beta: float = 1.0
    anchor_policy: str = "random_frame"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.anchor_policy != "random_frame":
            raise ValueError(f"unsupported anchor policy {self.anchor_policy!r}")

    @property
    def scale(self) -> float:
        return math.sqrt(self.beta ** 2 + 1)

    @property
    def target_variance(self) -> float:
        """Variance of a debiased non-anchor frame of unit-variance noise; exceeds 1 for beta > 0."""
        return 2 * self.beta ** 2 + 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4
    dropout: float = 0.1
    rank: int = 32
    steps_single_video: int = 400
    steps_multi_video: int = 1000
    loss_weights: tuple[float, float] = (1.0, 1.0)
    frames_per_clip: int = 8
    seed: int = 0

    def steps_for(self, n_clips: int) -> int:
        return self.steps_single_video if n_clips == 1 else self.steps_multi_video


@dataclass
class PretrainConfig:
    steps: int = 12000
    batch_size: int = 8
    lr: float = 5e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    warmup: int = 100
    prompt_dropout: float = 0.1
    # probability that the motion phrase is removed from the caption
    appearance_only_prob: float = 0.3
    gradient_background_prob: float = 0.2
    frames: int = 8
    resolution: int = 32
    seed: int = 0
    # the returned model holds an exponential moving average of the weights; 0 disables it
    ema_decay: float = 0.999


@dataclass
class TrainRun:
    spatial_sets: dict[str, AdapterSet]
    temporal_set: AdapterSet
    config: TrainConfig
    debias: DebiasConfig | None
    loss_history: list[dict] = field(default_factory=list)
    clips: list[dict] = field(default_factory=list)
    mode: str = "dual"


def _check_finite(step: int, **losses) -> None:
    bad = {k: float(torch.as_tensor(v).detach()) for k, v in losses.items()
           if not torch.isfinite(torch.as_tensor(v)).all()}
    if bad:
        raise NonFiniteLossError(step, ", ".join(f"{k}={v}" for k, v in bad.items()))


def _randint(gen: torch.Generator, lo: int, hi: int, n: int | None = None):
    """Uniform integers in [lo, hi]."""
    out = torch.randint(lo, hi + 1, (1 if n is None else n,), generator=gen)
    return int(out) if n is None else out


def noise_prediction_loss(model, z0, cond, schedule: NoiseSchedule, t, eps) -> torch.Tensor:
    z_t = forward_diffuse(z0, eps, t, schedule)
    return F.mse_loss(model(z_t, t, cond), eps)


# -- pre-training -----------------------------------------------------------------

def _caption_tokens(spec: SceneSpec, rng: np.random.Generator, cfg: PretrainConfig) -> tuple[int, ...]:
    r = rng.random()
    if r < cfg.prompt_dropout:
        return null_prompt().tokens
    with_motion = rng.random() >= cfg.appearance_only_prob
    return make_prompt(spec, with_motion).tokens


def pretrain_batch(rng: np.random.Generator, cfg: PretrainConfig):
    specs = [random_scene(rng, cfg.gradient_background_prob) for _ in range(cfg.batch_size)]
    videos = torch.stack([render_video(s, cfg.frames, cfg.resolution) for s in specs])
    tokens = torch.tensor([_caption_tokens(s, rng, cfg) for s in specs], dtype=torch.long)
    return videos, tokens


def pretrain_base(model, schedule: NoiseSchedule, cfg: PretrainConfig,
                  on_step: Callable[[int, float], None] | None = None,
                  on_snapshot: Callable[[int, dict], None] | None = None,
                  snapshot_every: int = 0) -> list[float]:
    """Optimize every model parameter, the token table included, with the noise-prediction loss.

    ``on_snapshot(steps_done, state_dict)`` receives the averaged weights every ``snapshot_every``
    steps; the learning rate is constant after warmup, so a snapshot at step n equals the
    result of an n-step run.
    """
    history: list[float] = []
    if cfg.steps <= 0:
        return history
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = list(model.parameters())
    ema = [p.detach().clone() for p in params] if cfg.ema_decay > 0 else None
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / max(cfg.warmup, 1)))

    def averaged_state() -> dict:
        state = model.state_dict()
        if ema is not None:
            names = [n for n, _ in model.named_parameters()]
            state = {**state, **{n: e.clone() for n, e in zip(names, ema)}}
        return state

    model.train()
    dtype = next(model.parameters()).dtype
    for step in range(cfg.steps):
        videos, tokens = pretrain_batch(rng, cfg)
        videos = videos.to(dtype)
        t = _randint(gen, 1, schedule.num_steps, cfg.batch_size)
        eps = torch.randn(videos.shape, generator=gen, dtype=dtype)
        loss = noise_prediction_loss(model, videos, model.encode_tokens(tokens), schedule, t, eps)
        _check_finite(step, loss=loss)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        sched.step()
        if ema is not None:
            decay = min(cfg.ema_decay, (1 + step) / (10 + step))
            with torch.no_grad():
                for e, p in zip(ema, params):
                    e.lerp_(p, 1 - decay)
        history.append(loss.item())
        if on_step is not None:
            on_step(step, history[-1])
        if on_snapshot is not None and snapshot_every and (step + 1) % snapshot_every == 0:
            on_snapshot(step + 1, averaged_state())
    if ema is not None:
        model.load_state_dict(averaged_state())
    model.eval()
    return history


# -- customization losses ---------------------------------------------------------

def debias(eps: torch.Tensor, anchor_index: int, beta: float, dim: int = -4) -> torch.Tensor:
    """sqrt(beta^2 + 1) * eps_i - beta * eps_anchor for every frame i along ``dim``."""
    frames = eps.shape[dim]
    if not 0 <= anchor_index < frames:
        raise ValueError(f"anchor {anchor_index} outside [0, {frames})")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    anchor = eps.narrow(dim, anchor_index, 1)
    return math.sqrt(beta * beta + 1) * eps - beta * anchor


def _as_batch(clip: torch.Tensor) -> torch.Tensor:
    return clip.unsqueeze(0) if clip.dim() == 4 else clip


def spatial_loss(model, clip: torch.Tensor, prompt: PromptSpec, schedule: NoiseSchedule,
                 rng: torch.Generator | None = None, *, frame_index: int | None = None,
                 t: int | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Noise-prediction loss on one randomly chosen frame, run as a single-frame clip."""
    z0 = _as_batch(clip)
    frames = z0.shape[1]
    if frames < 1:
        raise ValueError("empty clip")
    if frame_index is None:
        frame_index = _randint(rng, 0, frames - 1)
    if t is None:
        t = _randint(rng, 1, schedule.num_steps)
    frame = z0[:, frame_index:frame_index + 1]
    if eps is None:
        eps = torch.randn(frame.shape, generator=rng, dtype=frame.dtype)
    cond = model.encode_prompt(prompt).unsqueeze(0).expand(frame.shape[0], -1, -1)
    tt = torch.full((frame.shape[0],), t, dtype=torch.long)
    return noise_prediction_loss(model, frame, cond, schedule, tt, eps)


def temporal_loss(model, clip: torch.Tensor, prompt: PromptSpec, schedule: NoiseSchedule,
                  debias_cfg: DebiasConfig, rng: torch.Generator | None = None, *,
                  t: int | None = None, eps: torch.Tensor | None = None,
                  anchor: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(plain loss on the full clip, appearance-debiased loss with one anchor shared by both noise sets)."""
    z0 = _as_batch(clip)
    frames = z0.shape[1]
    if t is None:
        t = _randint(rng, 1, schedule.num_steps)
    if eps is None:
        eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    if anchor is None:
        anchor = _randint(rng, 0, frames - 1)
    cond = model.encode_prompt(prompt).unsqueeze(0).expand(z0.shape[0], -1, -1)
    tt = torch.full((z0.shape[0],), t, dtype=torch.long)
    eps_hat = model(forward_diffuse(z0, eps, tt, schedule), tt, cond)
    l_org = F.mse_loss(eps_hat, eps)
    l_ad = F.mse_loss(debias(eps_hat, anchor, debias_cfg.beta), debias(eps, anchor, debias_cfg.beta))
    return l_org, l_ad


# -- customization loops ----------------------------------------------------------

def _adamw(params, cfg: TrainConfig):
    return torch.optim.AdamW(list(params), lr=cfg.lr, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps,
                             weight_decay=cfg.weight_decay)


def _clip_meta(clips: Sequence[Clip]) -> list[dict]:
    return [{"source_id": c.source_id, "prompt": c.prompt.raw_text,
             "spec": c.spec.to_dict() if c.spec is not None else None,
             "frames": int(c.video.shape[0]), "resolution": int(c.video.shape[1])}
            for c in clips]


def _clip_order(n: int, steps: int, gen: torch.Generator) -> list[int]:
    order: list[int] = []
    while len(order) < steps:
        order.extend(torch.randperm(n, generator=gen).tolist())
    return order[:steps]


def train_customization(base, clips: Sequence[Clip], config: TrainConfig, debias_cfg: DebiasConfig,
                        schedule: NoiseSchedule, steps: int | None = None,
                        on_step: Callable[[dict], None] | None = None) -> TrainRun:
    """Dual-path training: per step a spatial update on one frame, then a temporal update on the clip."""
    if not clips:
        raise ValueError("no training clips")
    ids = [c.source_id for c in clips]
    if len(set(ids)) != len(ids):
        raise ValueError("source ids must be unique")
    steps = config.steps_for(len(clips)) if steps is None else steps
    spatial = {c.source_id: make_adapter_set(base, "spatial", config.rank, seed=config.seed * 7919 + i,
                                             source_id=c.source_id, dropout=config.dropout)
               for i, c in enumerate(clips)}
    temporal = make_adapter_set(base, "temporal", config.rank, seed=config.seed * 7919 + 7907,
                                source_id="+".join(ids), dropout=config.dropout)
    run = TrainRun(spatial, temporal, config, debias_cfg, clips=_clip_meta(clips), mode="dual")
    opt_s = _adamw((p for s in spatial.values() for p in s.parameters()), config)
    opt_t = _adamw(temporal.parameters(), config)
    w_org, w_ad = config.loss_weights
    dtype = next(base.parameters()).dtype

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = torch.Generator().manual_seed(config.seed)
        order = _clip_order(len(clips), steps, gen)
        base.train()
        try:
            for step, idx in enumerate(order):
                clip = clips[idx]
                video = clip.video.to(dtype)
                sset = spatial[clip.source_id]
                with inject(base, [sset], trainable=[sset]):
                    l_sp = spatial_loss(base, video, clip.prompt, schedule, gen)
                    _check_finite(step, l_spatial=l_sp)
                    opt_s.zero_grad(set_to_none=True)
                    l_sp.backward()
                    opt_s.step()
                with inject(base, [sset, temporal], trainable=[temporal]):
                    l_org, l_ad = temporal_loss(base, video, clip.prompt, schedule, debias_cfg, gen)
                    _check_finite(step, l_org_temp=l_org, l_ad_temp=l_ad)
                    opt_t.zero_grad(set_to_none=True)
                    (w_org * l_org + w_ad * l_ad).backward()
                    opt_t.step()
                rec = {"step": step, "source_id": clip.source_id, "l_spatial": l_sp.item(),
                       "l_org_temp": l_org.item(), "l_ad_temp": l_ad.item()}
                run.loss_history.append(rec)
                if on_step is not None:
                    on_step(rec)
        finally:
            base.eval()
    return run


def train_coupled(base, clips: Sequence[Clip], config: TrainConfig, schedule: NoiseSchedule,
                  steps: int | None = None, on_step: Callable[[dict], None] | None = None) -> TrainRun:
    """Baseline: spatial and temporal adapters trained jointly on full clips with the plain loss."""
    if not clips:
        raise ValueError("no training clips")
    steps = config.steps_for(len(clips)) if steps is None else steps
    ids = "+".join(c.source_id for c in clips)
    sset = make_adapter_set(base, "spatial", config.rank, seed=config.seed * 7919, source_id=ids,
                            dropout=config.dropout)
    tset = make_adapter_set(base, "temporal", config.rank, seed=config.seed * 7919 + 7907,
                            source_id=ids, dropout=config.dropout)
    run = TrainRun({ids: sset}, tset, config, None, clips=_clip_meta(clips), mode="coupled")
    opt = _adamw(list(sset.parameters()) + list(tset.parameters()), config)
    dtype = next(base.parameters()).dtype
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = torch.Generator().manual_seed(config.seed)
        order = _clip_order(len(clips), steps, gen)
        base.train()
        try:
            for step, idx in enumerate(order):
                clip = clips[idx]
                z0 = clip.video.to(dtype).unsqueeze(0)
                with inject(base, [sset, tset], trainable=[sset, tset]):
                    t = _randint(gen, 1, schedule.num_steps)
                    eps = torch.randn(z0.shape, generator=gen, dtype=dtype)
                    cond = base.encode_prompt(clip.prompt).unsqueeze(0)
                    loss = noise_prediction_loss(base, z0, cond, schedule, torch.tensor([t]), eps)
                    _check_finite(step, loss=loss)
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
                rec = {"step": step, "source_id": clip.source_id, "l_spatial": float("nan"),
                       "l_org_temp": loss.item(), "l_ad_temp": float("nan")}
                run.loss_history.append(rec)
                if on_step is not None:
                    on_step(rec)
        finally:
            base.eval()
    return run


# -- persistence ------------------------------------------------------------------

LOSS_FIELDS = ("step", "source_id", "l_spatial", "l_org_temp", "l_ad_temp")


def _diagnostics(run: TrainRun) -> dict:
    out: dict = {}
    if run.debias is not None:
        out["debiased_target_variance"] = run.debias.target_variance
        ratios = [h["l_ad_temp"] / h["l_org_temp"] for h in run.loss_history if h["l_org_temp"] > 0]
        out["mean_loss_ratio_ad_over_org"] = float(np.mean(ratios)) if ratios else None
    return out


def save_run(run: TrainRun, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spatial_dirs = {}
    for sid, sset in sorted(run.spatial_sets.items()):
        sub = f"spatial/{sanitize(sid)}"
        save_adapter_set(sset, directory / sub)
        spatial_dirs[sid] = sub
    save_adapter_set(run.temporal_set, directory / "temporal")
    cfg = asdict(run.config)
    dump_json({
        "mode": run.mode,
        "config": cfg,
        "debias": asdict(run.debias) if run.debias else None,
        "diagnostics": _diagnostics(run),
        "spatial_sets": spatial_dirs,
        "temporal_set": "temporal",
        "clips": run.clips,
        "adapter_parameters": {
            "spatial_per_set": next(iter(run.spatial_sets.values())).num_parameters(),
            "temporal": run.temporal_set.num_parameters(),
        },
    }, directory / "run.json")
    with open(directory / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in run.loss_history:
            w.writerow({k: (f"{rec[k]:.9g}" if isinstance(rec[k], float) else rec[k]) for k in LOSS_FIELDS})
    return directory


def load_run(directory: str | Path, model=None) -> TrainRun:
    directory = Path(directory)
    meta = json.loads((directory / "run.json").read_text(encoding="utf-8"))
    cfg = meta["config"]
    cfg["adam_betas"] = tuple(cfg["adam_betas"])
    cfg["loss_weights"] = tuple(cfg["loss_weights"])
    spatial = {sid: load_adapter_set(directory / sub, model) for sid, sub in meta["spatial_sets"].items()}
    temporal = load_adapter_set(directory / meta["temporal_set"], model)
    history = []
    with open(directory / "loss_history.csv", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            history.append({"step": int(row["step"]), "source_id": row["source_id"],
                            **{k: float(row[k]) for k in LOSS_FIELDS[2:]}})
    return TrainRun(spatial, temporal, TrainConfig(**cfg),
                    DebiasConfig(**meta["debias"]) if meta["debias"] else None,
                    history, meta["clips"], meta["mode"])


def clips_from_meta(meta: list[dict]) -> list[Clip]:
    """Re-render the training clips recorded in a run."""
    out = []
    for m in meta:
        spec = SceneSpec.from_dict(m["spec"])
        clip = clip_from_spec(spec, m["frames"], m["resolution"], m["source_id"])
        out.append(clip._replace(prompt=tokenize(m["prompt"])))
    return out
