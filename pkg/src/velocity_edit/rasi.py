"""Per-step calibration of the unconditional embedding against a source-reconstruction probe.

At each active step the probe conditions *both* branches on the source
condition while keeping the real guidance weights, and asks one Euler step of
the velocity difference to land back on the source latent.  The embedding
``phi`` that minimizes the miss is cached and later replaces the built-in null
embedding in both guided calls of the edit.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .flow import CondLike, Condition, GuidanceConfig, Schedule, VelocityField, cond_values
from .flowedit import couple, step_noises

log = logging.getLogger(__name__)

MAGIC = b"VS3DPHI1"


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class RasiConfig:
    inner_steps: int = 3
    lr: float = 1e-5
    early_stop: float = 1e-5
    lr_floor_frac: float = 0.1
    probe_batch: bool = True
    shared_probe_noise: bool = True

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.early_stop < 0:
            raise ValueError("early_stop must be >= 0")

    def step_lr(self, j: int, n_active: int) -> float:
        """Linear anneal over active steps, plus a floor."""
        return self.lr * (1.0 - j / n_active) + self.lr_floor_frac * self.lr


@dataclass
class PhiEntry:
    step: int
    phi: Condition
    loss_initial: float
    loss_final: float
    inner_steps: int = 0
    accepted: bool = True


@dataclass
class PhiCache:
    width: int
    entries: dict[int, PhiEntry] = field(default_factory=dict)
    probe_states: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def inject(self, k: int) -> Condition:
        try:
            return self.entries[k].phi
        except KeyError:
            raise KeyError(f"no calibrated embedding for step {k}") from None

    def __contains__(self, k: int) -> bool:
        return k in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", len(self.entries), self.width))
            for k in sorted(self.entries):
                e = self.entries[k]
                fh.write(struct.pack("<Idd", k, e.loss_initial, e.loss_final))
                fh.write(np.ascontiguousarray(e.phi.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PhiCache":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: not a phi cache")
        n, width = struct.unpack_from("<II", data, 8)
        off = 16
        cache = cls(width)
        rec = struct.calcsize("<Idd")
        if len(data) != off + n * (rec + 8 * width):
            raise ValueError(f"{path}: size does not match {n} entries of width {width}")
        for _ in range(n):
            k, l0, l1 = struct.unpack_from("<Idd", data, off)
            off += rec
            phi = np.frombuffer(data, "<f8", width, off).astype(np.float64)
            off += 8 * width
            cache.entries[k] = PhiEntry(k, Condition(phi, "optimized-null"), l0, l1)
        return cache


def _probe_terms(field: VelocityField, z_edit, x_src, c_src, t, noises):
    pair = couple(x_src, z_edit, noises, t)
    S = len(noises)
    zt = pair.z_tgt.reshape(S, -1)
    zs = pair.z_src.reshape(S, -1)
    vc_t = field.velocity(zt, t, c_src)
    vc_s = field.velocity(zs, t, c_src)
    return zt, zs, vc_t, vc_s


def probe_value_and_grad(field: VelocityField, z_edit: np.ndarray, x_src: np.ndarray, c_src: CondLike,
                         phi: CondLike, guidance: GuidanceConfig, t: float, dt: float, noises: np.ndarray,
                         *, need_grad: bool = True):
    """Probe loss and its gradient with respect to ``phi``.

    Both branches use ``c_src``; the target branch keeps ``omega_tgt``.  The
    velocity difference is averaged over the noise draws inside the norm.
    """
    noises = np.asarray(noises, dtype=np.float64)
    if noises.ndim == np.ndim(x_src) or len(noises) == 0:
        raise ValueError("noises must be a non-empty batch of draws")
    if np.shape(z_edit) != np.shape(x_src):
        raise ValueError(f"probe: shape mismatch {np.shape(z_edit)} vs {np.shape(x_src)}")
    c_src, phi = cond_values(c_src), cond_values(phi)
    w_s, w_t = guidance.omega_src, guidance.omega_tgt
    S = len(noises)
    zt, zs, vc_t, vc_s = _probe_terms(field, z_edit, x_src, c_src, t, noises)
    base = np.asarray(z_edit, dtype=np.float64).reshape(-1) - np.asarray(x_src, dtype=np.float64).reshape(-1)

    if w_s == 0.0 and w_t == 0.0:
        vd = (vc_t - vc_s).mean(axis=0)
        r = base + dt * vd
        return float(r @ r), np.zeros_like(phi)

    if not need_grad:
        vp_t = field.velocity(zt, t, phi)
        vp_s = field.velocity(zs, t, phi)
        vd = ((1 + w_t) * vc_t - w_t * vp_t - (1 + w_s) * vc_s + w_s * vp_s).mean(axis=0)
        r = base + dt * vd
        return float(r @ r), None

    if not field.differentiable:
        raise CalibrationError(f"{type(field).__name__} is not differentiable w.r.t. the embedding")
    tape = ad.Tape()
    p = tape.param(phi)
    vp_t = field.on_tape(tape, zt, t, p)
    vp_s = field.on_tape(tape, zs, t, p)
    # phi-independent part of the mean difference, folded into one constant
    const = base + dt * ((1 + w_t) * vc_t - (1 + w_s) * vc_s).mean(axis=0)
    mix = ad.sub(ad.scale(vp_s, w_s), ad.scale(vp_t, w_t))
    avg = ad.matmul(tape.const(np.full((1, S), 1.0 / S)), mix)
    r = ad.add(ad.scale(avg, dt), tape.const(const.reshape(1, -1)))
    loss = ad.sq_norm(r)
    grads = ad.backward(tape, loss)
    return float(loss.value), grads[p.id]


def probe_loss(field: VelocityField, z_edit, x_src, c_src, phi, guidance: GuidanceConfig, t: float, dt: float,
               noises) -> float:
    return probe_value_and_grad(field, z_edit, x_src, c_src, phi, guidance, t, dt, noises, need_grad=False)[0]


def probe_vdelta(field: VelocityField, z_edit, x_src, c_src, phi, guidance: GuidanceConfig, t: float, noises):
    """Mean probe velocity difference (both branches on ``c_src``)."""
    c_src, phi = cond_values(c_src), cond_values(phi)
    zt, zs, vc_t, vc_s = _probe_terms(field, z_edit, x_src, c_src, t, noises)
    w_s, w_t = guidance.omega_src, guidance.omega_tgt
    vd = vc_t - vc_s
    if w_t:
        vd = vd + w_t * (vc_t - field.velocity(zt, t, phi))
    if w_s:
        vd = vd - w_s * (vc_s - field.velocity(zs, t, phi))
    return vd.mean(axis=0).reshape(np.shape(x_src))


def calibrate(field: VelocityField, x_src: np.ndarray, c_src: CondLike, schedule: Schedule,
              guidance: GuidanceConfig, config: RasiConfig = RasiConfig(), S: int = 5, seed: int = 0,
              phi0: CondLike | None = None) -> PhiCache:
    """Fit one embedding per active step, walking the probe trajectory from ``t = 1`` down.

    The target condition is deliberately not a parameter.
    """
    if not field.differentiable:
        raise CalibrationError(f"{type(field).__name__} is not differentiable w.r.t. the embedding")
    if S < 1:
        raise ValueError("need S >= 1")
    x_src = np.asarray(x_src, dtype=np.float64)
    phi0 = np.zeros(field.cond_dim) if phi0 is None else cond_values(phi0).copy()
    if phi0.shape != (field.cond_dim,):
        raise CalibrationError(f"phi0 width {phi0.shape} != field width {field.cond_dim}")
    cache = PhiCache(field.cond_dim)
    active = schedule.active_steps
    stream = "edit" if config.shared_probe_noise else "probe"
    z = x_src.copy()
    for j, k in enumerate(active):
        t, dt = schedule.t(k), schedule.dt(k)
        w_s, w_t = guidance.gated(schedule, t)
        g_k = GuidanceConfig(w_s, w_t)
        noises = step_noises(seed, k, S, x_src.shape, stream)
        if not config.probe_batch:
            noises = noises[:1]
        lr = config.step_lr(j, len(active))

        def value_and_grad(phi):
            return probe_value_and_grad(field, z, x_src, c_src, phi, g_k, t, dt, noises)

        phi = phi0.copy()
        state = ad.AdamState(lr=lr)
        loss0, grad = value_and_grad(phi)
        loss, used = loss0, 0
        for i in range(config.inner_steps):
            if i > 0:
                loss, grad = value_and_grad(phi)
            if loss < config.early_stop:
                break
            (phi,) = ad.adam_step(state, [phi], [grad], lr)
            used += 1
        final = probe_loss(field, z, x_src, c_src, phi, g_k, t, dt, noises) if used else loss0
        accepted = final <= loss0
        if not accepted:
            phi, final = phi0.copy(), loss0
        cache.probe_states[k] = z.copy()
        cache.entries[k] = PhiEntry(k, Condition(phi, "optimized-null"), loss0, final, used, accepted)
        log.debug("rasi step %d t=%.3f loss %.3g -> %.3g (%d inner, accepted=%s)", k, t, loss0, final, used, accepted)
        z = z + dt * probe_vdelta(field, z, x_src, c_src, phi, g_k, t, noises)
    return cache


def inject(cache: PhiCache, k: int) -> Condition:
    return cache.inject(k)
