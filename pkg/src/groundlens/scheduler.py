"""DDIM noise schedule and the deterministic inversion / denoising updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError
from .numerics import as_tensor

DEFAULT_TIMESTEPS = 300
DEFAULT_BETA_START = 0.0015
DEFAULT_BETA_END = 0.0205
DEFAULT_STYLE = "scaled_linear"


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar[0..T]`` with ``alpha_bar[0] == 1``."""

    total_steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.total_steps + 1,):
            raise ArgumentError(
                f"alpha_bar must have T+1={self.total_steps + 1} entries, got {ab.shape}"
            )
        if not (0.99 < ab[0] <= 1.0) or np.any(ab <= 0) or np.any(np.diff(ab) >= 0):
            raise ArgumentError("alpha_bar must start near 1 and decrease strictly in (0, 1]")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)


def make_schedule(
    T: int = DEFAULT_TIMESTEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    style: str = DEFAULT_STYLE,
) -> NoiseSchedule:
    """Build ``alpha_bar_t = prod_{i<=t} (1 - beta_i)`` for ``t = 0..T``.

    ``linear`` spaces the betas evenly; ``scaled_linear`` spaces their square
    roots evenly (the usual latent-diffusion convention).
    """
    if T < 1:
        raise ArgumentError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ArgumentError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if style == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif style == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
    else:
        raise ArgumentError(f"unknown schedule style {style!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T, alpha_bar)


def _check(z, eps, t, sched):
    if not 0 <= t < sched.total_steps:
        raise ArgumentError(f"t={t} outside [0, {sched.total_steps})")
    z = np.asarray(z)
    eps = np.asarray(eps)
    if z.shape != eps.shape:
        raise DimensionError(f"latent {z.shape} and noise {eps.shape} differ in shape")
    return z.astype(np.float64), eps.astype(np.float64)


def ddim_invert_step(z_t, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Move a latent from step ``t`` to ``t + 1`` along the deterministic DDIM path."""
    z, e = _check(z_t, eps, t, sched)
    a_t = sched.alpha_bar[t]
    a_next = sched.alpha_bar[t + 1]
    x0 = (z - np.sqrt(1.0 - a_t) * e) / np.sqrt(a_t)
    return as_tensor(np.sqrt(a_next) * x0 + np.sqrt(1.0 - a_next) * e)


def ddim_denoise_step(z_next, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact inverse of :func:`ddim_invert_step`: recover ``z_t`` from ``z_{t+1}``."""
    z, e = _check(z_next, eps, t, sched)
    a_t = sched.alpha_bar[t]
    a_next = sched.alpha_bar[t + 1]
    x0 = (z - np.sqrt(1.0 - a_next) * e) / np.sqrt(a_next)
    return as_tensor(np.sqrt(a_t) * x0 + np.sqrt(1.0 - a_t) * e)
