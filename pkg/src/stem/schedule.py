"""Linear noise schedule and the forward (noising) marginal.

Formula indexing is 1-based (t = 1..T); storage is 0-based with the
convention alpha_bar at t=0 equal to 1, which makes the first backward
step deterministic (sigma_1^2 = 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta_t, alpha_t, alpha_bar_t, sigma_t^2 for t = 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def alpha_bar_at(self, t) -> np.ndarray:
        """alpha_bar for 1-based step(s) t."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ParameterError(f"step t={t} outside 1..{self.T}")
        return self.alpha_bar[t - 1]


def build_linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """beta_t = (t/T) beta_max + (1 - t/T) beta_min for t = 1..T."""
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = (t / T) * beta_max + (1.0 - t / T) * beta_min
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # alpha_bar_{t-1} with the alpha_bar_0 = 1 convention
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2)


def forward_marginal(x0, t: int, eps, sched: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    Accepts a scalar t with array inputs, or a per-row t array with
    matching leading dimension.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ParameterError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = sched.alpha_bar_at(t)
    if np.ndim(ab) > 0:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
