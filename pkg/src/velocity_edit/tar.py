"""Twin-agreement residual injection for the sparse token stages.

The sparse sampler is run twice on the target coordinates with the same
noise, once per condition.  Tokens whose outputs agree are pulled back toward
the source encoding; tokens that only exist on the target side are untouched.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .toy.shapes import SparseSlat, coord_keys

DEGENERATE_SPREAD = 1e-12


class SamplerNondeterminism(RuntimeError):
    pass


@dataclass(frozen=True)
class TarConfig:
    lam: float = 0.5
    tau: float = 10.0
    theta: float = 0.7
    alpha: float = 0.05
    beta: float = 0.95
    d_metric: str = "l2"

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lam must lie in (0, 1], got {self.lam}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.theta < 1.0:
            raise ValueError(f"theta must lie in [0, 1), got {self.theta}")
        if not 0.0 <= self.alpha < self.beta <= 1.0:
            raise ValueError(f"need 0 <= alpha < beta <= 1, got ({self.alpha}, {self.beta})")
        if self.d_metric not in ("l2", "normalized"):
            raise ValueError(f"unknown d_metric {self.d_metric!r}")


@dataclass
class AgreementField:
    coords: np.ndarray
    d: np.ndarray
    p_flow: np.ndarray
    q_alpha: float
    q_beta: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coord_x", "coord_y", "d", "p_flow"])
            for (row, col), d, p in zip(self.coords, self.d, self.p_flow):
                w.writerow([int(col), int(row), repr(float(d)), repr(float(p))])


def quantile(values: np.ndarray, q: float) -> float:
    """Sorted linear interpolation at rank ``(n - 1) q``."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    pos = (len(v) - 1) * q
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return float(v[lo] + (pos - lo) * (v[hi] - v[lo]))


def agreement_from_distances(d: np.ndarray, alpha: float = 0.05, beta: float = 0.95,
                             coords: np.ndarray | None = None) -> AgreementField:
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise ValueError("agreement needs at least one token")
    qa, qb = quantile(d, alpha), quantile(d, beta)
    if qb - qa < DEGENERATE_SPREAD:
        p = np.ones_like(d)
    else:
        p = 1.0 - np.clip((d - qa) / (qb - qa), 0.0, 1.0)
    if coords is None:
        coords = np.zeros((len(d), 2), dtype=np.int64)
    return AgreementField(np.asarray(coords), d, p, qa, qb)


def agreement(z_tgt: SparseSlat, z_twin: SparseSlat, alpha: float = 0.05, beta: float = 0.95,
              d_metric: str = "l2") -> AgreementField:
    if z_tgt.coords.shape != z_twin.coords.shape or not np.array_equal(z_tgt.coords, z_twin.coords):
        raise ValueError("twin outputs live on different coordinates")
    diff = z_tgt.feats - z_twin.feats
    if d_metric == "normalized":
        scale = np.concatenate([z_tgt.feats, z_twin.feats]).std(axis=0)
        diff = diff / np.where(scale > 0, scale, 1.0)
    d = np.linalg.norm(diff, axis=1)
    return agreement_from_distances(d, alpha, beta, z_tgt.coords)


def clip_residual(r: np.ndarray, tau: float) -> np.ndarray:
    """Rescale each vector (last axis) to norm at most ``tau``."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    r = np.asarray(r, dtype=np.float64)
    norm = np.linalg.norm(r, axis=-1, keepdims=True)
    factor = np.minimum(1.0, tau / np.where(norm > 0, norm, 1.0))
    return r * factor


def _check_unique(slat: SparseSlat, name: str) -> np.ndarray:
    keys = coord_keys(slat.coords)
    if len(np.unique(keys)) != len(keys):
        raise ValueError(f"duplicate coordinates in {name}")
    return keys


def blend(z_tgt: SparseSlat, z_src_enc: SparseSlat, field: AgreementField, config: TarConfig) -> SparseSlat:
    """Retract agreeing tokens on the shared coordinates toward the source encoding."""
    kt = _check_unique(z_tgt, "target slat")
    ks = _check_unique(z_src_enc, "source encoding")
    if len(field.p_flow) != len(z_tgt):
        raise ValueError("agreement field does not match the target tokens")
    shared, it, is_ = np.intersect1d(kt, ks, assume_unique=True, return_indices=True)
    out = z_tgt.feats.copy()
    p = field.p_flow[it]
    gain = config.lam * p * (p >= config.theta)
    keep = gain > 0
    if np.any(keep):
        r = clip_residual(z_src_enc.feats[is_[keep]] - z_tgt.feats[it[keep]], config.tau)
        out[it[keep]] = z_tgt.feats[it[keep]] + gain[keep, None] * r
    return z_tgt.replace(out, "blended")


def twin_forward(sampler, coords: np.ndarray, eps: np.ndarray, c_tgt, c_src, geometry=None,
                 check_determinism: bool = False):
    """Same coordinates, noise and sampler settings; only the condition differs."""
    z_tgt = sampler(coords, eps, c_tgt, geometry)
    if check_determinism:
        again = sampler(coords, eps, c_tgt, geometry)
        if not np.array_equal(again.feats, z_tgt.feats):
            raise SamplerNondeterminism("two target-condition runs disagree")
    z_twin = sampler(coords, eps, c_src, geometry)
    return z_tgt, z_twin


@dataclass
class StageResult:
    blended: SparseSlat
    z_tgt: SparseSlat
    z_twin: SparseSlat
    field: AgreementField
    forwards: int


def run_stage(sampler, coords: np.ndarray, eps: np.ndarray, c_src, c_tgt, z_src_enc: SparseSlat,
              config: TarConfig, geometry: np.ndarray | None = None) -> StageResult:
    """Twin forwards, agreement, blend.  Exactly two sampler invocations."""
    before = getattr(sampler, "calls", None)
    z_tgt, z_twin = twin_forward(sampler, coords, eps, c_tgt, c_src, geometry)
    forwards = 2 if before is None else sampler.calls - before
    if forwards != 2:
        raise RuntimeError(f"expected 2 sampler forwards per stage, saw {forwards}")
    fieldv = agreement(z_tgt, z_twin, config.alpha, config.beta, config.d_metric)
    return StageResult(blend(z_tgt, z_src_enc, fieldv, config), z_tgt, z_twin, fieldv, forwards)
