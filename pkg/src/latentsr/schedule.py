"""Diffusion mathematics: schedule tables, noising, sampling, guidance.

The training-time tables follow the linear-beta DDPM convention with a
full-length T grid; few-step inference subsamples that grid. The ancestral
step uses the posterior sigma with the final step forced noiseless. The
Euler sampler works in sigma space: with x = x0 + sigma * eps the flow
direction is the predicted eps itself, and the eps-model sees the
variance-preserving rescale x / sqrt(sigma^2 + 1) of the current state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "NoiseSchedule",
    "GuidanceConfig",
    "forward_noise",
    "forward_noise_batch",
    "ddpm_step",
    "cfg_combine",
    "sample_timesteps",
    "euler_sigma_grid",
    "euler_sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep alpha/alpha-bar/sigma tables, immutable once built."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @staticmethod
    def linear(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        sigmas = np.sqrt((1.0 - prev) / (1.0 - alpha_bars)) * np.sqrt(1.0 - alphas)
        sigmas[0] = 0.0
        return NoiseSchedule(betas, alphas, alpha_bars, sigmas)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return t

    def sigma_ve(self, t: int) -> float:
        """Variance-exploding sigma: sqrt((1 - abar) / abar)."""
        ab = self.alpha_bars[self.check_t(t)]
        return float(np.sqrt((1.0 - ab) / ab))


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 5.0

    def __post_init__(self):
        if not np.isfinite(self.scale):
            raise ValueError(f"guidance scale must be finite, got {self.scale}")


def forward_noise(x0: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"forward_noise: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bars[sched.check_t(t)]
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def forward_noise_batch(x0: np.ndarray, eps: np.ndarray, t: np.ndarray,
                        sched: NoiseSchedule) -> np.ndarray:
    """forward_noise with one timestep per leading-axis sample."""
    t = np.asarray(t, dtype=np.int64)
    if x0.shape != eps.shape or t.shape != (x0.shape[0],):
        raise ValueError(f"forward_noise_batch: x0 {x0.shape}, eps {eps.shape}, t {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= sched.T):
        raise ValueError(f"forward_noise_batch: timesteps outside [0,{sched.T})")
    ab = sched.alpha_bars[t].reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, z: np.ndarray,
              sched: NoiseSchedule) -> np.ndarray:
    """One ancestral denoising step from t to t-1."""
    if x_t.shape != eps_hat.shape or x_t.shape != z.shape:
        raise ValueError(f"ddpm_step: shapes {x_t.shape}, {eps_hat.shape}, {z.shape}")
    t = sched.check_t(t)
    a = sched.alphas[t]
    ab = sched.alpha_bars[t]
    mean = (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    return (mean + sched.sigmas[t] * z).astype(np.float32)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """eps_uncond + s * (eps_cond - eps_uncond); exact at s in {0, 1}."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"cfg_combine: shapes {eps_cond.shape} vs {eps_uncond.shape}")
    if s == 1.0:
        return eps_cond
    if s == 0.0:
        return eps_uncond
    return (eps_uncond + np.float32(s) * (eps_cond - eps_uncond)).astype(np.float32)


def sample_timesteps(rng: np.random.Generator, batch: int, T: int) -> np.ndarray:
    return rng.integers(0, T, size=batch)


def euler_sigma_grid(sched: NoiseSchedule, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer timesteps from T-1 down to 0 plus their VE sigmas (with a
    trailing 0 so the last step lands exactly on the data manifold)."""
    if steps < 1:
        raise ValueError(f"euler_sample: steps must be >= 1, got {steps}")
    ts = np.unique(np.round(np.linspace(sched.T - 1, 0, steps)).astype(np.int64))[::-1]
    sigmas = np.array([sched.sigma_ve(int(t)) for t in ts] + [0.0])
    return ts, sigmas


def euler_sample(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    shape: tuple,
    sched: NoiseSchedule,
    steps: int,
    rng: Optional[np.random.Generator] = None,
    x_init: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Integrate dx/dsigma = eps_hat from sigma_max to 0 on the subsampled grid.

    ``eps_fn(x_scaled, t)`` receives the variance-preserving view of the
    state (x / sqrt(sigma^2 + 1)) and the integer schedule timestep; guidance
    combination happens inside the callable so this loop stays oblivious to
    conditioning. ``x_init`` overrides the seeded Gaussian start (used by
    closed-form oracle tests).
    """
    ts, sigmas = euler_sigma_grid(sched, steps)
    if x_init is not None:
        x = x_init.astype(np.float32).copy()
    else:
        if rng is None:
            raise ValueError("euler_sample: need rng when x_init is not given")
        x = (rng.standard_normal(shape) * sigmas[0]).astype(np.float32)
    for i, t in enumerate(ts):
        sig = sigmas[i]
        x_scaled = (x / np.sqrt(sig * sig + 1.0)).astype(np.float32)
        d = eps_fn(x_scaled, int(t))
        x = (x + (sigmas[i + 1] - sig) * d).astype(np.float32)
    return x
