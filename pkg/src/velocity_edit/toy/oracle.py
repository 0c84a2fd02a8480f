"""Closed-form marginal velocity for Gaussian data and standard-normal noise.

With ``x0 ~ N(m, s^2 I)`` and ``eps ~ N(0, I)`` independent, ``x_t`` is
Gaussian with mean ``(1 - t) m`` and variance ``sigma^2 = (1 - t)^2 s^2 + t^2``
per coordinate, and ``E[eps - x0 | x_t = x]`` is affine in ``x``.
"""
from __future__ import annotations

import numpy as np

from ..flow import COND_DIM, VelocityField


def oracle_velocity(x: np.ndarray, t: float, mean: np.ndarray, std: float) -> np.ndarray:
    """``E[eps - x0 | x_t = x]``; ignores any condition."""
    var = (1.0 - t) ** 2 * std ** 2 + t ** 2
    gain = (t - (1.0 - t) * std ** 2) / var
    return gain * (x - (1.0 - t) * mean) - mean


class GaussianOracleField(VelocityField):
    """Exact velocity field transporting ``N(0, I)`` at ``t = 1`` to ``N(m, s^2 I)`` at ``t = 0``."""

    def __init__(self, mean, std: float, cond_dim: int = COND_DIM):
        if not std > 0:
            raise ValueError(f"std must be > 0, got {std}")
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.std = float(std)
        self.state_shape = self.mean.shape
        self.cond_dim = cond_dim

    def velocity(self, xb, t, e):
        return oracle_velocity(xb, t, self.mean.reshape(1, -1), self.std)


def gaussian_oracle_field(mean, std: float) -> GaussianOracleField:
    return GaussianOracleField(mean, std)
