"""DDPM schedule, mixed-granularity noising, strided ancestral sampling, EMA."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .content import combine
from .dvae import LatentMixture
from .tensor import Rng, ShapeError


@dataclass
class DiffusionSchedule:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.num_steps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def sample_steps(self, n: int = 250) -> np.ndarray:
        """``n`` evenly spaced timesteps from 0 to T-1 inclusive, ascending."""
        if not 1 <= n <= self.num_steps:
            raise ValueError(f"cannot pick {n} sampling steps out of {self.num_steps}")
        if n == 1:
            return np.array([self.num_steps - 1])
        steps = np.round(np.linspace(0, self.num_steps - 1, n)).astype(np.int64)
        if len(np.unique(steps)) != n:
            raise ValueError("sampling steps collide")
        return steps

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if (t < 0).any() or (t >= self.num_steps).any():
            raise ValueError(f"timestep out of range [0, {self.num_steps})")


def structured_noise(rng: Rng, grain: torch.Tensor, channels: int, size: int):
    """Coarse noise on the region grid and fine noise on the fine grid."""
    B, rows, cols = grain.shape
    eps_coarse = rng.child("coarse").normal(B, channels, rows, cols)
    eps_fine = rng.child("fine").normal(B, channels, size, size)
    return eps_coarse, eps_fine


def q_sample(schedule: DiffusionSchedule, z0: torch.Tensor, t: torch.Tensor, grain: torch.Tensor, rng: Rng):
    """Noise the mixture to step ``t``; coarse-region noise is replicated.

    Returns ``(z_t, (eps_coarse, eps_fine), eps)`` where ``eps`` is the
    combined fine-grid noise actually added.
    """
    schedule.check_t(t.numpy())
    B, C, H, W = z0.shape
    eps_coarse, eps_fine = structured_noise(rng, grain, C, H)
    eps = combine(eps_coarse, eps_fine, grain)
    ab = torch.from_numpy(schedule.alpha_bars[t.numpy()]).float().view(B, 1, 1, 1)
    z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    return z_t, (eps_coarse, eps_fine), eps


EpsFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def guided_eps(eps_fn: EpsFn, z_t, t, y, grain, guidance: float, null_class: int) -> torch.Tensor:
    eps_cond = eps_fn(z_t, t, y, grain)
    if guidance == 1.0:
        return eps_cond
    eps_uncond = eps_fn(z_t, t, torch.full_like(y, null_class), grain)
    return eps_uncond + guidance * (eps_cond - eps_uncond)


def predict_x0(schedule: DiffusionSchedule, z_t: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    ab = schedule.alpha_bars[t]
    return (z_t - float(np.sqrt(1 - ab)) * eps) / float(np.sqrt(ab))


def p_sample_step(schedule: DiffusionSchedule, eps_fn: EpsFn, z_t, t: int, t_prev: int, y, grain,
                  guidance: float, rng: Rng, null_class: int) -> torch.Tensor:
    """One strided DDPM step from ``t`` to ``t_prev`` (-1 means the data end)."""
    if not (0 <= t < schedule.num_steps and -1 <= t_prev < t):
        raise ValueError(f"invalid step pair ({t}, {t_prev})")
    B = z_t.shape[0]
    t_batch = torch.full((B,), t, dtype=torch.long)
    eps = guided_eps(eps_fn, z_t, t_batch, y, grain, guidance, null_class)
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t_prev] if t_prev >= 0 else 1.0
    alpha = ab_t / ab_prev
    beta = 1.0 - alpha
    x0 = predict_x0(schedule, z_t, t, eps)
    coef_x0 = float(np.sqrt(ab_prev) * beta / (1 - ab_t))
    coef_zt = float(np.sqrt(alpha) * (1 - ab_prev) / (1 - ab_t))
    mean = coef_x0 * x0 + coef_zt * z_t
    if t_prev < 0:
        return mean
    sigma = float(np.sqrt(beta * (1 - ab_prev) / (1 - ab_t)))
    eps_coarse, eps_fine = structured_noise(rng, grain, z_t.shape[1], z_t.shape[-1])
    return mean + sigma * combine(eps_coarse, eps_fine, grain)


def sample(schedule: DiffusionSchedule, eps_fn: EpsFn, grain: torch.Tensor, channels: int, size: int,
           rng: Rng, y: torch.Tensor | None = None, steps: int = 250, guidance: float = 1.0,
           null_class: int = 0, callback=None) -> LatentMixture:
    """Run the strided chain from structured pure noise; returns the final mixture."""
    B = grain.shape[0]
    if y is None:
        y = torch.full((B,), null_class, dtype=torch.long)
    if y.shape[0] != B:
        raise ShapeError("labels and grain maps disagree on batch size", tuple(y.shape), tuple(grain.shape))
    eps_coarse, eps_fine = structured_noise(rng.child("init"), grain, channels, size)
    z = combine(eps_coarse, eps_fine, grain)
    ts = schedule.sample_steps(steps)[::-1]
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
            z = p_sample_step(schedule, eps_fn, z, int(t), t_prev, y, grain, guidance, rng.child("step", i), null_class)
            if callback is not None:
                callback(int(t), z)
    return LatentMixture(z, grain)


class Ema:
    """Shadow copy of a model's parameters updated as a moving average."""

    def __init__(self, model: torch.nn.Module, decay: float = 0.9999):
        self.decay = decay
        self.shadow = {n: p.detach().clone() for n, p in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for name, p in model.named_parameters():
            s = self.shadow[name]
            if s.shape != p.shape:
                raise ShapeError(f"EMA shadow shape mismatch for {name}", s.shape, p.shape)
            s.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def swap(self, model: torch.nn.Module) -> None:
        """Exchange live and shadow weights; calling twice restores both."""
        for name, p in model.named_parameters():
            s = self.shadow[name]
            if s.shape != p.shape:
                raise ShapeError(f"EMA shadow shape mismatch for {name}", s.shape, p.shape)
            tmp = p.detach().clone()
            p.copy_(s)
            s.copy_(tmp)

    def state_dict(self) -> dict:
        return {"decay": self.decay, "shadow": {k: v.clone() for k, v in self.shadow.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.decay = state["decay"]
        self.shadow = {k: v.clone() for k, v in state["shadow"].items()}
