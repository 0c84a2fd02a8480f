"""Binary latent dumps and PGM renders."""
from __future__ import annotations

import csv
import re
import struct
from pathlib import Path

import numpy as np

from .toy.shapes import SparseSlat

GRID_MAGIC = b"VS3DGRID"
SLAT_MAGIC = b"VS3DSLAT"


def save_grid(path, z: np.ndarray) -> None:
    """``VS3DGRID``, u32 rank, u32 dims, then little-endian f64 row-major payload."""
    z = np.asarray(z, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", z.ndim))
        fh.write(struct.pack(f"<{z.ndim}I", *z.shape))
        fh.write(np.ascontiguousarray(z, dtype="<f8").tobytes())


def load_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != GRID_MAGIC:
        raise ValueError(f"{path}: not a latent grid dump")
    (ndim,) = struct.unpack_from("<I", data, 8)
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    off = 12 + 4 * ndim
    n = int(np.prod(dims)) if dims else 1
    if len(data) != off + 8 * n:
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(data, "<f8", n, off).reshape(dims).astype(np.float64)


def save_slat(path, slat: SparseSlat) -> None:
    """``VS3DSLAT``, u32 count, u32 width, i64 (row, col) pairs, then f64 features."""
    with open(path, "wb") as fh:
        fh.write(SLAT_MAGIC)
        fh.write(struct.pack("<II", len(slat), slat.feats.shape[1]))
        fh.write(np.ascontiguousarray(slat.coords, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(slat.feats, dtype="<f8").tobytes())


def load_slat(path, tag: str = "") -> SparseSlat:
    data = Path(path).read_bytes()
    if data[:8] != SLAT_MAGIC:
        raise ValueError(f"{path}: not a token dump")
    n, width = struct.unpack_from("<II", data, 8)
    if len(data) != 16 + 16 * n + 8 * n * width:
        raise ValueError(f"{path}: payload size does not match {n} tokens of width {width}")
    coords = np.frombuffer(data, "<i8", 2 * n, 16).reshape(n, 2)
    feats = np.frombuffer(data, "<f8", n * width, 16 + 16 * n).reshape(n, width)
    return SparseSlat(coords.astype(np.int64), feats.astype(np.float64), tag)


def read_agreement_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of ``AgreementField.write_csv``: ``(coords (row, col), d, p_flow)``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    coords = np.array([[int(r["coord_y"]), int(r["coord_x"])] for r in rows], dtype=np.int64).reshape(-1, 2)
    d = np.array([float(r["d"]) for r in rows])
    p = np.array([float(r["p_flow"]) for r in rows])
    return coords, d, p


def write_pgm(path, img: np.ndarray) -> None:
    """Binary (P5) 8-bit greyscale image; ``img`` values are clipped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    px = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # exactly one whitespace byte separates the header from the pixels
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    px = data[m.end():]
    if len(px) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {len(px)}")
    return np.frombuffer(px, np.uint8).reshape(h, w).astype(np.float64) / maxval


def render_occupancy(path, z: np.ndarray) -> None:
    """White where the latent is positive (inside)."""
    z = np.asarray(z)
    write_pgm(path, (z.reshape(z.shape[-2:]) > 0).astype(float))


def render_heat(path, coords: np.ndarray, values: np.ndarray, R: int) -> None:
    """Scatter per-token values in [0, 1] onto an ``R x R`` canvas (background 0)."""
    img = np.zeros((R, R))
    coords = np.asarray(coords, dtype=np.int64)
    if len(coords):
        img[coords[:, 0], coords[:, 1]] = values
    write_pgm(path, img)
