"""Partial-mean guidance: extrapolate from a nested partial mean toward the full mean."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PmgConfig:
    w: float = 1.2
    L: int = 2

    def __post_init__(self):
        if not np.isfinite(self.w) or self.w < 0:
            raise ValueError(f"extrapolation weight must be finite and >= 0, got {self.w}")
        if self.L < 1:
            raise ValueError(f"partial count L must be >= 1, got {self.L}")

    def check(self, S: int) -> None:
        if not self.L < S:
            raise ValueError(f"need L < S, got L={self.L}, S={S}")


def partial_means(samples: np.ndarray, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean of all samples and mean of the first ``L`` (draw order)."""
    samples = np.asarray(samples, dtype=np.float64)
    S = len(samples)
    if not 1 <= L < S:
        raise ValueError(f"need 1 <= L < S, got L={L}, S={S}")
    return samples.mean(axis=0), samples[:L].mean(axis=0)


def pmg_update(samples: np.ndarray, config: PmgConfig) -> np.ndarray:
    mu_s, mu_l = partial_means(samples, config.L)
    return (1.0 + config.w) * mu_s - config.w * mu_l


def pmg_rule(config: PmgConfig):
    """Update rule for :func:`velocity_edit.flowedit.edit_loop`."""
    def rule(samples):
        return pmg_update(samples, config)
    return rule
