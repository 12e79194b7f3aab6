"""Noise schedules, closed-form forward noising, and DDPM / DDIM samplers.

Timesteps are 1-based throughout (``t = 1 .. T``); ``alpha_bar(0)`` is the
empty product 1. Samples are stored as rows: ``x`` has shape
``(cells, genes)`` and a predictor receives the whole batch plus one
timestep per row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Rng, ShapeError

NoisePredictor = Callable[[np.ndarray, np.ndarray], np.ndarray]
"""``predictor(x_t, t) -> eps_hat`` with ``eps_hat.shape == x_t.shape``."""


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return t.astype(np.int64)

    def alpha_bar_at(self, t):
        """``alpha_bar`` with the ``t = 0`` convention (returns 1)."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 0..{self.T}: {t}")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def posterior_variance(self, t):
        """``beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t``."""
        t = self._check(t)
        abar_prev = self.alpha_bar_at(t - 1)
        return (1.0 - abar_prev) / (1.0 - self.alpha_bar[t - 1]) * self.beta[t - 1]

    def posterior_mean(self, x0, x_t, t):
        """Mean of ``q(x_{t-1} | x_t, x_0)``."""
        t = self._check(t)
        abar = self.alpha_bar[t - 1]
        abar_prev = self.alpha_bar_at(t - 1)
        beta = self.beta[t - 1]
        c0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
        ct = np.sqrt(self.alpha[t - 1]) * (1.0 - abar_prev) / (1.0 - abar)
        return c0 * x0 + ct * x_t


def make_schedule(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ValueError("beta must be a non-empty 1-D sequence")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("every beta must lie in (0, 1)")
    if np.any(np.diff(beta) < 0):
        raise ValueError("beta must be non-decreasing")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=np.sqrt(beta))


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return make_schedule(np.linspace(beta_start, beta_end, T))


def _per_row(coef, x: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape((-1,) + (1,) * (x.ndim - 1))


def forward_noise(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """Jump straight to ``x_t``: ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` is a scalar or one timestep per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    abar = schedule.alpha_bar[schedule._check(t) - 1]
    return _per_row(np.sqrt(abar), x0) * x0 + _per_row(np.sqrt(1.0 - abar), x0) * eps


def _predict(predictor: NoisePredictor, x: np.ndarray, t: int) -> np.ndarray:
    eps = np.asarray(predictor(x, np.full(x.shape[0], t, dtype=np.int64)))
    if eps.shape != x.shape:
        raise ShapeError(f"predictor returned shape {eps.shape}, expected {x.shape}")
    return eps


def ddpm_step(schedule: NoiseSchedule, predictor: NoisePredictor, x_t, t: int, rng: Rng) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}`` with ``sigma_t^2 = beta_t``.

    No noise is added on the last step (``t = 1``), and ``rng`` is not
    consumed there.
    """
    t = int(schedule._check(t))
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = _predict(predictor, x_t, t)
    alpha = schedule.alpha[t - 1]
    abar = schedule.alpha_bar[t - 1]
    mean = (x_t - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps) / np.sqrt(alpha)
    if t == 1:
        return mean
    return mean + schedule.sigma[t - 1] * rng.normal(x_t.shape)


def ddpm_sample(schedule: NoiseSchedule, predictor: NoisePredictor, shape, rng: Rng, x_T=None) -> np.ndarray:
    """Run the full reverse chain from ``x_T ~ N(0, I)``."""
    x = rng.normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    for t in range(schedule.T, 0, -1):
        x = ddpm_step(schedule, predictor, x, t, rng)
    return x


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced subsequence of ``1..T`` including both ends, descending."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in 1..{T}, got {steps}")
    if steps == 1:
        return np.array([T], dtype=np.int64)
    taus = np.unique(np.round(np.linspace(1, T, steps)).astype(np.int64))
    return taus[::-1]


def ddim_sigma(schedule: NoiseSchedule, tau: int, tau_prev: int, eta: float) -> float:
    """Noise scale for the jump ``tau -> tau_prev`` (``tau_prev`` may be 0)."""
    abar = schedule.alpha_bar_at(tau)
    abar_prev = schedule.alpha_bar_at(tau_prev)
    return float(eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar)) * np.sqrt(1.0 - abar / abar_prev))


def ddim_sample(
    schedule: NoiseSchedule,
    predictor: NoisePredictor,
    shape,
    steps: int,
    eta: float,
    rng: Rng,
    x_T=None,
) -> np.ndarray:
    """DDIM sampling on a strided timestep subsequence.

    ``eta = 0`` is deterministic given ``x_T``; ``eta = 1`` with
    ``steps = T`` reproduces the DDPM posterior variance at each step.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    taus = ddim_timesteps(schedule.T, steps)
    x = rng.normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    for i, tau in enumerate(taus):
        tau = int(tau)
        tau_prev = int(taus[i + 1]) if i + 1 < len(taus) else 0
        eps = _predict(predictor, x, tau)
        abar = schedule.alpha_bar_at(tau)
        abar_prev = schedule.alpha_bar_at(tau_prev)
        x0_hat = (x - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)
        sig = ddim_sigma(schedule, tau, tau_prev, eta)
        direction = np.sqrt(max(1.0 - abar_prev - sig * sig, 0.0)) * eps
        x = np.sqrt(abar_prev) * x0_hat + direction
        if sig > 0.0:
            x = x + sig * rng.normal(shape)
    return x
