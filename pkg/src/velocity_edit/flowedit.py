"""Inversion-free editing: shared-noise coupling, velocity differences, the edit loop.

The edit state starts at the source latent and is moved only by the difference
between the target-branch and source-branch guided velocities, evaluated on a
pair of latents that share one noise draw.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .flow import CondLike, GuidanceConfig, Schedule, VelocityField, cfg_velocity, cond_values

_STREAMS = {"edit": 0, "probe": 1}


class EditDiverged(FloatingPointError):
    pass


def step_noises(seed: int, k: int, S: int, shape: tuple[int, ...], stream: str = "edit") -> np.ndarray:
    """``S`` standard-normal draws for schedule step ``k``; a pure function of its arguments."""
    rng = np.random.default_rng([seed, k, _STREAMS[stream]])
    return rng.standard_normal((S, *shape))


@dataclass
class CoupledPair:
    z_src: np.ndarray
    z_tgt: np.ndarray
    eps: np.ndarray
    t: float


def couple(x_src: np.ndarray, z_edit: np.ndarray, eps: np.ndarray, t: float) -> CoupledPair:
    """Source latent noised with ``eps`` at ``t``, and the target latent offset by the edit.

    ``eps`` may carry a leading sample axis; ``x_src`` and ``z_edit`` broadcast over it.
    """
    x_src, z_edit, eps = (np.asarray(a, dtype=np.float64) for a in (x_src, z_edit, eps))
    if x_src.shape != z_edit.shape or eps.shape[eps.ndim - x_src.ndim:] != x_src.shape:
        raise ValueError(f"couple: shape mismatch x_src{x_src.shape} z_edit{z_edit.shape} eps{eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    # both latents get the same noise displacement, so a zero edit offset gives
    # z_tgt == z_src and t == 0 gives (x_src, z_edit), bit for bit
    shift = t * (eps - x_src)
    z_src = x_src + shift
    z_tgt = z_edit + shift
    return CoupledPair(z_src, z_tgt, eps, t)


def vdelta_sample(field: VelocityField, pair: CoupledPair, c_src: CondLike, c_tgt: CondLike, phi: CondLike,
                  guidance: GuidanceConfig, schedule: Schedule | None = None) -> np.ndarray:
    """Target-branch minus source-branch guided velocity.

    With a ``schedule`` both weights are zeroed outside its CFG interval.
    """
    if schedule is not None:
        w_src, w_tgt = guidance.gated(schedule, pair.t)
    else:
        w_src, w_tgt = guidance.omega_src, guidance.omega_tgt
    v_tgt = cfg_velocity(field, pair.z_tgt, pair.t, c_tgt, phi, w_tgt)
    v_src = cfg_velocity(field, pair.z_src, pair.t, c_src, phi, w_src)
    return v_tgt - v_src


def residual_diagnostic(field: VelocityField, x_src: np.ndarray, c_src: CondLike, phi: CondLike,
                        guidance: GuidanceConfig, t: float, eps: np.ndarray):
    """Compare the degenerate velocity difference (target condition := source
    condition, edit state := source) with its closed form
    ``(w_tgt - w_src) * (v(z, c_src) - v(z, phi))``.

    Returns ``(lhs, rhs, gap)`` with ``gap = max |lhs - rhs|``.
    """
    pair = couple(x_src, x_src, eps, t)
    lhs = vdelta_sample(field, pair, c_src, c_src, phi, guidance)
    rhs = (guidance.omega_tgt - guidance.omega_src) * (field(pair.z_src, t, c_src) - field(pair.z_src, t, phi))
    gap = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    return lhs, rhs, gap


UpdateRule = Callable[[np.ndarray], np.ndarray]


def plain_mean(samples: np.ndarray) -> np.ndarray:
    return np.mean(samples, axis=0)


def _phi_for(phi, k: int) -> np.ndarray:
    if hasattr(phi, "inject"):
        return phi.inject(k).values
    return cond_values(phi)


def edit_loop(field: VelocityField, x_src: np.ndarray, c_src: CondLike, c_tgt: CondLike, schedule: Schedule,
              guidance: GuidanceConfig, S: int, update_rule: UpdateRule = plain_mean, *,
              phi: Union[CondLike, "object"] = None, seed: int = 0, trace: list | None = None) -> np.ndarray:
    """Integrate the edit state over the active steps of ``schedule``.

    ``phi`` is either one unconditional embedding or a cache exposing
    ``inject(k)`` (per-step calibrated embeddings).  When given, ``trace``
    receives one dict per active step with the velocity-difference samples, the
    applied update and the state after the step.
    """
    if S < 1:
        raise ValueError("need S >= 1 noise samples")
    x_src = np.asarray(x_src, dtype=np.float64)
    if phi is None:
        phi = np.zeros(field.cond_dim)
    c_src, c_tgt = cond_values(c_src), cond_values(c_tgt)
    z = x_src.copy()
    for k in schedule.active_steps:
        t, dt = schedule.t(k), schedule.dt(k)
        phi_k = _phi_for(phi, k)
        pair = couple(x_src, z, step_noises(seed, k, S, x_src.shape), t)
        samples = vdelta_sample(field, pair, c_src, c_tgt, phi_k, guidance, schedule)
        u = update_rule(samples)
        if not np.all(np.isfinite(u)):
            raise EditDiverged(f"non-finite update at step {k}")
        z = z + dt * u
        if trace is not None:
            trace.append({"k": k, "t": t, "samples": samples, "update": u, "z": z.copy()})
    return z
