"""Rectified-flow primitives shared by every sampler in the package.

Time runs from 1 (pure noise) to 0 (data).  The forward process is the
straight line ``x_t = (1 - t) x0 + t eps`` and a velocity field regresses
``eps - x0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import autodiff as ad

COND_DIM = 8
_T_TOL = 1e-12

ROLES = ("source", "target", "null", "optimized-null")


@dataclass(eq=False)
class Condition:
    """Fixed-width embedding vector: a condition ``c`` or an unconditional ``phi``."""
    values: np.ndarray
    role: str = "source"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.role not in ROLES:
            raise ValueError(f"unknown condition role {self.role!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("condition has non-finite entries")

    @property
    def width(self) -> int:
        return self.values.size

    def with_role(self, role: str) -> "Condition":
        return Condition(self.values.copy(), role)

    def __repr__(self) -> str:
        return f"Condition(role={self.role!r}, values={np.array2string(self.values, precision=3)})"


CondLike = Union[Condition, np.ndarray]


def cond_values(c: CondLike) -> np.ndarray:
    return c.values if isinstance(c, Condition) else np.asarray(c, dtype=np.float64)


class VelocityField:
    """Evaluation contract ``(x, t, e) -> v`` with ``v.shape == x.shape``.

    ``x`` is either one state of ``state_shape`` or a batch ``(B, *state_shape)``;
    ``e`` is one embedding of width ``cond_dim`` shared by the batch.  Fields with
    ``differentiable = True`` also implement :meth:`on_tape`, which returns the
    velocity as a tape node (batch, flattened state) so gradients reach ``e``.
    """

    state_shape: tuple[int, ...] = ()
    cond_dim: int = COND_DIM
    differentiable: bool = False

    def velocity(self, xb: np.ndarray, t: float, e: np.ndarray) -> np.ndarray:
        """Batched evaluation on ``xb`` of shape ``(B, n)`` (flattened states)."""
        raise NotImplementedError

    def on_tape(self, tape: ad.Tape, xb: np.ndarray, t: float, e: ad.Node) -> ad.Node:
        raise TypeError(f"{type(self).__name__} is not differentiable w.r.t. the embedding")

    def __call__(self, x: np.ndarray, t: float, e: CondLike) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        e = cond_values(e)
        if e.shape != (self.cond_dim,):
            raise ValueError(f"condition width {e.shape} != field width {self.cond_dim}")
        single = x.shape == tuple(self.state_shape)
        if not single and x.shape[1:] != tuple(self.state_shape):
            raise ValueError(f"state shape {x.shape} incompatible with field state {self.state_shape}")
        xb = x.reshape(1 if single else x.shape[0], -1)
        v = self.velocity(xb, float(t), e)
        return v.reshape(x.shape)


@dataclass(frozen=True)
class Schedule:
    """Uniform descending grid ``t_k = 1 - k/T`` with active window and CFG interval."""
    T: int = 25
    n_max: int = 12
    n_min: int = 0
    cfg_interval: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("schedule needs T >= 1")
        if not 0 <= self.n_min <= self.n_max <= self.T:
            raise ValueError(f"need 0 <= n_min <= n_max <= T, got n_min={self.n_min} n_max={self.n_max} T={self.T}")
        lo, hi = self.cfg_interval
        if not lo <= hi:
            raise ValueError("cfg_interval must be (lo, hi) with lo <= hi")

    @classmethod
    def sampling(cls, T: int = 25) -> "Schedule":
        """Plain generation grid: every step active, guidance everywhere."""
        return cls(T=T, n_max=T, cfg_interval=(0.0, 1.0))

    @property
    def timesteps(self) -> np.ndarray:
        ts = 1.0 - np.arange(self.T + 1) / self.T
        ts[0], ts[-1] = 1.0, 0.0
        return ts

    def t(self, k: int) -> float:
        return float(self.timesteps[k])

    def dt(self, k: int) -> float:
        """Signed step ``t_{k+1} - t_k`` (negative)."""
        ts = self.timesteps
        return float(ts[k + 1] - ts[k])

    def is_active(self, k: int) -> bool:
        return self.T - self.n_max <= k < self.T - self.n_min

    @property
    def active_steps(self) -> list[int]:
        return [k for k in range(self.T) if self.is_active(k)]

    def cfg_on(self, t: float) -> bool:
        lo, hi = self.cfg_interval
        return lo - _T_TOL <= t <= hi + _T_TOL


@dataclass(frozen=True)
class GuidanceConfig:
    omega_src: float = 1.5
    omega_tgt: float = 9.0

    def __post_init__(self):
        if not (np.isfinite(self.omega_src) and np.isfinite(self.omega_tgt)):
            raise ValueError("guidance weights must be finite")

    def gated(self, schedule: Schedule, t: float) -> tuple[float, float]:
        """``(omega_src, omega_tgt)`` at time ``t``; both zero outside the CFG interval."""
        if schedule.cfg_on(t):
            return self.omega_src, self.omega_tgt
        return 0.0, 0.0


def _check_t(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")


def interpolate(x0: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"interpolate: shape mismatch {x0.shape} vs {eps.shape}")
    _check_t(t)
    return (1.0 - t) * x0 + t * eps


def estimate_x0(x: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
    x, v = np.asarray(x, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if x.shape != v.shape:
        raise ValueError(f"estimate_x0: shape mismatch {x.shape} vs {v.shape}")
    _check_t(t)
    return x - t * v


def cfg_velocity(field: VelocityField, x: np.ndarray, t: float, c: CondLike, phi: CondLike,
                 omega: float) -> np.ndarray:
    """``(1 + omega) v(x, t, c) - omega v(x, t, phi)``; a single evaluation when ``omega == 0``."""
    vc = field(x, t, c)
    if omega == 0.0:
        return vc
    return (1.0 + omega) * vc - omega * field(x, t, phi)


def euler_sample(field: VelocityField, schedule: Schedule, eps: np.ndarray, c: CondLike, phi: CondLike,
                 omega: float, *, gate_cfg: bool = False) -> np.ndarray:
    """Integrate from ``t = 1`` to ``t = 0`` with ``T`` Euler steps.

    With ``gate_cfg`` the guidance weight is zeroed outside the schedule's CFG interval.
    """
    x = np.array(eps, dtype=np.float64)
    for k in range(schedule.T):
        t = schedule.t(k)
        w = omega if (not gate_cfg or schedule.cfg_on(t)) else 0.0
        x = x + schedule.dt(k) * cfg_velocity(field, x, t, c, phi, w)
    return x


# -- simple analytic fields -------------------------------------------------

@dataclass(eq=False)
class ConstantField(VelocityField):
    u: np.ndarray
    cond_dim: int = COND_DIM

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.state_shape = self.u.shape

    def velocity(self, xb, t, e):
        return np.broadcast_to(self.u.reshape(1, -1), xb.shape).copy()


@dataclass(eq=False)
class LinearField(VelocityField):
    """``v(z, t, e) = A z + B e + g`` on flattened states; differentiable in ``e``."""
    A: np.ndarray
    B: np.ndarray
    g: np.ndarray
    state_shape: tuple[int, ...] = field(default=())
    differentiable: bool = True

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64).reshape(-1)
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.g.shape != (n,):
            raise ValueError("LinearField: A must be n x n, B n x D, g length n")
        if not self.state_shape:
            self.state_shape = (n,)
        if int(np.prod(self.state_shape)) != n:
            raise ValueError("state_shape does not match A")
        self.cond_dim = self.B.shape[1]

    def velocity(self, xb, t, e):
        return xb @ self.A.T + (self.B @ e + self.g)

    def on_tape(self, tape, xb, t, e):
        be = ad.reshape(ad.matmul(tape.const(self.B), e), (1, -1))
        return ad.affine(tape.const(np.ones((xb.shape[0], 1))), be, tape.const(xb @ self.A.T + self.g))
