"""Procedural 2-D shapes: a disk body with an optional square hat.

Grid cell ``(row, col)`` has its center at ``(x, y) = (col + 0.5, row + 0.5)``;
rows grow downward, so "atop" means smaller ``y``.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from ..flow import COND_DIM, Condition

RHO_RANGE = (0.25, 0.45)
HAT_RANGE = (0.10, 0.25)
GEOM_DIM = 4
MAT_DIM = 4
# sdf is reported in units of a quarter grid width
SDF_SCALE = 0.25


@dataclass(frozen=True)
class ShapeParams:
    rho: float
    hat: float = 0.0
    hat_hue: float = 0.0
    body_hue: float = 0.5

    def __post_init__(self):
        lo, hi = RHO_RANGE
        if not lo <= self.rho <= hi:
            raise ValueError(f"rho={self.rho} outside [{lo}, {hi}]")
        if self.hat != 0.0 and not HAT_RANGE[0] <= self.hat <= HAT_RANGE[1]:
            raise ValueError(f"hat={self.hat} must be 0 or inside {HAT_RANGE}")
        for name in ("hat_hue", "body_hue"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    def with_hat(self, hat: float, hat_hue: float | None = None) -> "ShapeParams":
        return ShapeParams(self.rho, hat, self.hat_hue if hat_hue is None else hat_hue, self.body_hue)


@dataclass(eq=False)
class SparseSlat:
    """Sorted unique integer coordinates ``(row, col)`` with one feature row each."""
    coords: np.ndarray
    feats: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise ValueError(f"{self.feats.shape[0] if self.feats.ndim else '?'} feature rows for {len(self.coords)} coords")
        if len(self.coords) > 1:
            keys = coord_keys(self.coords)
            if np.any(np.diff(keys) <= 0):
                raise ValueError("slat coords must be sorted and unique")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    def replace(self, feats: np.ndarray, tag: str | None = None) -> "SparseSlat":
        return SparseSlat(self.coords.copy(), feats, self.tag if tag is None else tag)


def coord_keys(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    return coords[:, 0] * (1 << 32) + coords[:, 1]


def coords_from_mask(mask: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    return np.stack([rows, cols], axis=1).astype(np.int64)  # nonzero is row-major sorted


@dataclass
class ShapeSample:
    stage1: np.ndarray          # (1, R, R) occupancy, +1 inside / -1 outside
    geom: SparseSlat
    mat: SparseSlat
    hat_mask: np.ndarray        # (R, R) bool, cells covered by the hat square


def _geometry(params: ShapeParams, R: int):
    cx, cy, r = 0.5 * R, 0.6 * R, params.rho * R
    centers = np.arange(R) + 0.5
    X, Y = np.meshgrid(centers, centers)  # X varies along columns
    dx, dy = X - cx, Y - cy
    dist = np.hypot(dx, dy)
    sdf_disk = dist - r
    n_disk = np.stack([dx, dy]) / np.where(dist > 0, dist, 1.0)

    if params.hat > 0:
        half = 0.5 * params.hat * R
        hx, hy = cx, cy - r
        qx, qy = np.abs(X - hx) - half, np.abs(Y - hy) - half
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        sdf_box = outside + inside
        # normal: gradient of the box sdf
        sx, sy = np.sign(X - hx), np.sign(Y - hy)
        mx, my = np.maximum(qx, 0), np.maximum(qy, 0)
        norm_out = np.where(outside > 0, outside, 1.0)
        nbx = np.where(outside > 0, sx * mx / norm_out, np.where(qx >= qy, sx, 0.0))
        nby = np.where(outside > 0, sy * my / norm_out, np.where(qx >= qy, 0.0, sy))
        hat_mask = (qx <= 0) & (qy <= 0)
    else:
        sdf_box = np.full((R, R), np.inf)
        nbx = nby = np.zeros((R, R))
        hat_mask = np.zeros((R, R), dtype=bool)

    use_box = sdf_box < sdf_disk
    sdf = np.where(use_box, sdf_box, sdf_disk)
    nx = np.where(use_box, nbx, n_disk[0])
    ny = np.where(use_box, nby, n_disk[1])
    body_mask = sdf_disk <= 0
    return sdf, nx, ny, body_mask, hat_mask


def hue_rgb(hue: float) -> np.ndarray:
    return 2.0 * np.array(colorsys.hsv_to_rgb(hue % 1.0, 0.8, 0.9)) - 1.0


def gen_shape(params: ShapeParams, R: int = 24) -> ShapeSample:
    """Rasterize ``params`` on an ``R x R`` grid (deterministic)."""
    if R < 8:
        raise ValueError(f"grid resolution R={R} < 8")
    sdf, nx, ny, body_mask, hat_mask = _geometry(params, R)
    occ = body_mask | hat_mask
    coords = coords_from_mask(occ)
    r, c = coords[:, 0], coords[:, 1]
    ones = np.ones(len(coords))
    geom = np.stack([sdf[r, c] / (SDF_SCALE * R), nx[r, c], ny[r, c], ones], axis=1)
    on_hat = hat_mask[r, c]
    rgb = np.where(on_hat[:, None], hue_rgb(params.hat_hue), hue_rgb(params.body_hue))
    mat = np.concatenate([rgb, ones[:, None]], axis=1)
    stage1 = np.where(occ, 1.0, -1.0)[None]
    return ShapeSample(stage1, SparseSlat(coords, geom, "geometry"), SparseSlat(coords, mat, "material"), hat_mask)


def preserve_mask(a: ShapeParams, b: ShapeParams, R: int = 24) -> np.ndarray:
    """Cells covered by the hat of neither parameter set (evaluation only)."""
    return ~(gen_shape(a, R).hat_mask | gen_shape(b, R).hat_mask)


# -- condition embedding --------------------------------------------------------

def _mixing_matrix() -> np.ndarray:
    # fixed orthonormal columns, dense in every coordinate
    rng = np.random.default_rng(20240607)
    q, _ = np.linalg.qr(rng.standard_normal((COND_DIM, 6)))
    return q


_MIX = _mixing_matrix()


def shape_features(params: ShapeParams) -> np.ndarray:
    two_pi = 2.0 * np.pi
    return np.array([
        (params.rho - 0.35) / 0.1,
        params.hat / 0.125 - 1.0,
        np.cos(two_pi * params.hat_hue), np.sin(two_pi * params.hat_hue),
        np.cos(two_pi * params.body_hue), np.sin(two_pi * params.body_hue),
    ])


def embed_condition(params: ShapeParams, role: str = "source") -> Condition:
    """Global width-8 embedding: orthonormal mix of linear size terms and hue sinusoids."""
    return Condition(_MIX @ shape_features(params), role)


def null_condition() -> Condition:
    return Condition(np.zeros(COND_DIM), "null")


def sample_params(rng: np.random.Generator, hat_prob: float = 0.5) -> ShapeParams:
    rho = rng.uniform(*RHO_RANGE)
    hat = rng.uniform(*HAT_RANGE) if rng.random() < hat_prob else 0.0
    return ShapeParams(float(rho), float(hat), float(rng.random()), float(rng.random()))


def encode_source_tokens(asset: SparseSlat) -> SparseSlat:
    """Toy encoder: latents are their own codes."""
    return SparseSlat(asset.coords.copy(), asset.feats.copy(), "source-encoded")
