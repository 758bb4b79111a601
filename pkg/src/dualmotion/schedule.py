"""Linear-beta DDPM schedule, forward noising, the reverse step and a guided sampler.

Timesteps are 1-indexed: ``t`` runs over ``1..T`` and ``alpha_bar(0) == 1`` denotes clean data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .text import PromptSpec, null_prompt


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    num_steps: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float | None = None
    beta_end: float | None = None

    @classmethod
    def from_alphas(cls, alphas: Sequence[float]) -> "NoiseSchedule":
        """Schedule from an explicit per-step alpha table, each in (0, 1]."""
        a = np.asarray(alphas, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("alphas must be a non-empty 1-D sequence")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("alphas must lie in (0, 1]")
        return cls(int(a.size), a, np.cumprod(a))

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    def alpha_bar(self, t: int) -> float:
        self.check_t(t)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def check_t(self, t: int, allow_zero: bool = True) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= int(t) <= self.num_steps:
            raise ValueError(f"timestep {t} outside [{lo}, {self.num_steps}]")

    def inference_timesteps(self, steps: int) -> list[int]:
        """``steps`` integer timesteps spread uniformly over [1, T], largest first."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        steps = min(steps, self.num_steps)
        ts = np.unique(np.round(np.linspace(1, self.num_steps, steps)).astype(int))
        return [int(t) for t in ts[::-1]]


def make_schedule(num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if num_steps < 1:
        raise ValueError("num_steps must be positive")
    if not (0 < beta_start < 1 and 0 < beta_end < 1):
        raise ValueError("betas must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(num_steps, alphas, np.cumprod(alphas), beta_start, beta_end)


def _alpha_bar_tensor(schedule: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """Per-batch alpha_bar broadcastable against ``like`` (b, ...)."""
    ts = torch.as_tensor(t).reshape(-1)
    if ts.min() < 1 or ts.max() > schedule.num_steps:
        raise ValueError(f"timestep outside [1, {schedule.num_steps}]")
    table = torch.from_numpy(schedule.alpha_bars)
    ab = table[ts.long() - 1].to(like.dtype)
    return ab.reshape(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(z0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps; ``t`` is an int or one step per batch row."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    if isinstance(t, int):
        schedule.check_t(t, allow_zero=False)
        ab = float(schedule.alpha_bars[t - 1])
        return ab ** 0.5 * z0 + (1.0 - ab) ** 0.5 * eps
    ab = _alpha_bar_tensor(schedule, t, z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def predict_z0(z_t: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    ab = schedule.alpha_bar(t)
    return (z_t - (1.0 - ab) ** 0.5 * eps) / ab ** 0.5


def ddpm_step(
    eps_hat: torch.Tensor,
    z_t: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    generator: torch.Generator | Sequence[torch.Generator] | None = None,
    prev_t: int | None = None,
    clip_sample: bool = True,
) -> torch.Tensor:
    """One reverse step from ``t`` to ``prev_t`` (default ``t - 1``) via the DDPM posterior.

    Noise is added only when ``prev_t > 0``. ``generator`` may be a list with one generator
    per batch row so each row's noise stream is independent of its batch neighbours.
    """
    if eps_hat.shape != z_t.shape:
        raise ValueError("eps_hat and z_t shapes differ")
    schedule.check_t(t, allow_zero=False)
    prev_t = t - 1 if prev_t is None else prev_t
    if not 0 <= prev_t < t:
        raise ValueError(f"prev_t {prev_t} must lie in [0, {t})")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(prev_t)
    alpha_t = ab_t / ab_prev
    beta_t = 1.0 - alpha_t

    z0_hat = (z_t - (1.0 - ab_t) ** 0.5 * eps_hat) / ab_t ** 0.5
    if clip_sample:
        z0_hat = z0_hat.clamp(-1.0, 1.0)
    coef_z0 = ab_prev ** 0.5 * beta_t / (1.0 - ab_t)
    coef_zt = alpha_t ** 0.5 * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = coef_z0 * z0_hat + coef_zt * z_t
    if prev_t == 0:
        return mean
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    noise = gaussian_like(z_t, generator)
    return mean + var ** 0.5 * noise


def gaussian_like(x: torch.Tensor, generator=None) -> torch.Tensor:
    if isinstance(generator, (list, tuple)):
        if len(generator) != x.shape[0]:
            raise ValueError("need one generator per batch row")
        return torch.stack([torch.randn(x.shape[1:], generator=g, dtype=x.dtype) for g in generator])
    return torch.randn(x.shape, generator=generator, dtype=x.dtype)


def seeded_generators(seeds: Sequence[int]) -> list[torch.Generator]:
    return [torch.Generator().manual_seed(int(s)) for s in seeds]


@torch.no_grad()
def sample(
    model,
    prompt: PromptSpec,
    shape: Sequence[int],
    seed: int | Sequence[int],
    schedule: NoiseSchedule,
    steps: int = 30,
    guidance_scale: float = 12.0,
    clip_sample: bool = True,
) -> torch.Tensor:
    """Reverse loop from seeded Gaussian noise with classifier-free guidance.

    ``shape`` is (b, f, h, w, c). ``seed`` is either one int (row ``i`` uses ``seed + i``) or
    one seed per row; each row draws all of its noise from its own generator.
    """
    if len(shape) != 5 or any(int(s) < 1 for s in shape):
        raise ValueError(f"invalid video shape {tuple(shape)}")
    b = int(shape[0])
    seeds = [int(seed) + i for i in range(b)] if isinstance(seed, int) else [int(s) for s in seed]
    if len(seeds) != b:
        raise ValueError("need one seed per batch row")
    gens = seeded_generators(seeds)
    dtype = next(model.parameters()).dtype
    z = torch.stack([torch.randn(tuple(shape[1:]), generator=g, dtype=dtype) for g in gens])

    cond = model.encode_prompt(prompt).unsqueeze(0).expand(b, -1, -1)
    uncond = model.encode_prompt(null_prompt(len(prompt.tokens))).unsqueeze(0).expand(b, -1, -1)
    timesteps = schedule.inference_timesteps(steps)
    for i, t in enumerate(timesteps):
        prev_t = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        tt = torch.full((b,), t, dtype=torch.long)
        if guidance_scale == 1.0:
            eps = model(z, tt, cond)
        elif guidance_scale == 0.0:
            eps = model(z, tt, uncond)
        else:
            both = model(torch.cat([z, z]), torch.cat([tt, tt]), torch.cat([cond, uncond]))
            eps_c, eps_u = both[:b], both[b:]
            eps = eps_u + guidance_scale * (eps_c - eps_u)
        z = ddpm_step(eps, z, t, schedule, gens, prev_t=prev_t, clip_sample=clip_sample)
    return z
