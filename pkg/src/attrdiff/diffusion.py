"""Noise schedule, forward process, DDIM update and guidance arithmetic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, UsageError

# ``t_prev`` value meaning "the clean image" (alpha_bar = 1).
CLEAN = -1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor

    def __post_init__(self):
        b = self.betas.double()
        if b.ndim != 1 or not torch.all((b > 0) & (b < 1)):
            raise ConfigurationError("betas must be a vector with entries in (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", 1.0 - b)
        object.__setattr__(self, "alpha_bars", torch.cumprod(1.0 - b, 0))

    @classmethod
    def linear(cls, T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t, like: torch.Tensor) -> torch.Tensor:
        """``alpha_bar_t`` broadcastable against ``like``; ``t == CLEAN`` gives 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < CLEAN) or torch.any(t >= self.T):
            raise UsageError(f"timestep out of range [0, {self.T})")
        ab = torch.where(t == CLEAN, torch.ones((), dtype=torch.float64), self.alpha_bars[t.clamp(min=0)])
        ab = ab.to(like.dtype)
        return ab.reshape(ab.shape + (1,) * (like.ndim - ab.ndim))

    def sampling_timesteps(self, steps: int) -> list[int]:
        """Descending, evenly spaced timesteps ending at 0."""
        if steps < 1:
            raise ConfigurationError("need at least one sampling step")
        ts = np.linspace(self.T - 1, 0, steps).round().astype(int)
        return [int(t) for t in ts]


def _check_t(schedule: NoiseSchedule, t):
    t = torch.as_tensor(t)
    if torch.any(t < 0) or torch.any(t >= schedule.T):
        raise UsageError(f"timestep out of range [0, {schedule.T})")


def add_noise(schedule: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    _check_t(schedule, t)
    ab = schedule.alpha_bar(t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def ddim_x0_approx(schedule: NoiseSchedule, x_t: torch.Tensor, t, noise_est: torch.Tensor) -> torch.Tensor:
    _check_t(schedule, t)
    ab = schedule.alpha_bar(t, x_t)
    return (x_t - (1 - ab).sqrt() * noise_est) / ab.sqrt()


def ddim_step(
    schedule: NoiseSchedule,
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    noise_est: torch.Tensor,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    clip: tuple | None = None,
) -> torch.Tensor:
    """One DDIM update from ``t`` to ``t_prev`` (``CLEAN`` for the final step).

    ``clip=(lo, hi)`` clamps the clean estimate to the data range and re-derives
    the noise from it, which keeps high-noise steps from amplifying errors.
    """
    if not t_prev < t:
        raise UsageError(f"DDIM step needs t_prev < t, got t={t}, t_prev={t_prev}")
    _check_t(schedule, t)
    x0 = ddim_x0_approx(schedule, x_t, t, noise_est)
    if clip is not None:
        x0 = x0.clamp(*clip)
        ab = schedule.alpha_bar(t, x_t)
        noise_est = (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()
    ab_prev = schedule.alpha_bar(t_prev, x_t)
    if eta == 0 or t_prev == CLEAN:
        return ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * noise_est
    ab = schedule.alpha_bar(t, x_t)
    sigma = eta * ((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)).sqrt()
    direction = (1 - ab_prev - sigma ** 2).clamp(min=0).sqrt() * noise_est
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return ab_prev.sqrt() * x0 + direction + sigma * noise


def cfg_combine(cond_est: torch.Tensor, uncond_est: torch.Tensor, scale: float) -> torch.Tensor:
    if cond_est.shape != uncond_est.shape:
        raise ConfigurationError("conditional and unconditional estimates differ in shape")
    if scale == 1:
        return cond_est.clone()
    if scale == 0:
        return uncond_est.clone()
    return uncond_est + scale * (cond_est - uncond_est)


def landmark_heatmap(points, size: int, sigma: float = 1.5) -> torch.Tensor:
    """Gaussian blobs, one channel per landmark: ``(batch, K, size, size)``.

    ``points`` is ``(batch, K, 2)`` in pixel coordinates (x, y).
    """
    pts = torch.as_tensor(points, dtype=torch.float32)
    if pts.ndim == 2:
        pts = pts.unsqueeze(0)
    c = torch.arange(size, dtype=torch.float32) + 0.5
    dx = c.view(1, 1, 1, size) - pts[..., 0].view(*pts.shape[:2], 1, 1)
    dy = c.view(1, 1, size, 1) - pts[..., 1].view(*pts.shape[:2], 1, 1)
    return torch.exp(-(dx ** 2 + dy ** 2) / (2 * sigma ** 2))
