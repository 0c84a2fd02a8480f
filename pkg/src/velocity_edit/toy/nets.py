"""Three-layer perceptron velocity networks for the dense and sparse toy stages."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..flow import COND_DIM, Schedule, VelocityField, cond_values, euler_sample
from .shapes import GEOM_DIM, MAT_DIM, SparseSlat

MAGIC = b"VS3DTOY1"
TIME_FREQS = (0.5, 1.0, 2.0, 4.0)
COORD_FREQS = (1.0, 2.0, 4.0)
KINDS = ("dense", "geometry", "material")
# the clean-sample head divides by max(t, T_FLOOR)
T_FLOOR = 0.02


def time_features(t) -> np.ndarray:
    """``(..., 8)`` sinusoidal features of ``t``."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    ang = 2.0 * np.pi * np.asarray(TIME_FREQS) * t
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def coord_features(coords: np.ndarray, R: int) -> np.ndarray:
    uv = (np.asarray(coords, dtype=np.float64) + 0.5) / R - 0.5
    ang = 2.0 * np.pi * uv[:, :, None] * np.asarray(COORD_FREQS)
    return np.concatenate([uv, np.sin(ang).reshape(len(uv), -1), np.cos(ang).reshape(len(uv), -1)], axis=1)


N_TIME = 2 * len(TIME_FREQS)
N_COORD = 2 + 4 * len(COORD_FREQS)


def main_width(kind: str, state_dim: int) -> int:
    if kind == "dense":
        return state_dim + N_TIME
    token = GEOM_DIM if kind == "geometry" else MAT_DIM
    extra = GEOM_DIM if kind == "material" else 0
    return 2 * token + N_COORD + N_TIME + extra


class ToyNet:
    """``tanh`` MLP; the first layer is split into a main block and a condition block.

    Parameters are ``[W1_main, W1_cond, b1, W2, b2, W3, b3]``.  The perceptron
    output ``D`` is a clean-sample estimate and the velocity is
    ``(x - D) / max(t, T_FLOOR)``, which lets a narrow network carry the noise
    part of the velocity exactly.
    """

    def __init__(self, kind: str, state_dim: int, hidden: int = 256, cond_dim: int = COND_DIM,
                 seed: int = 0, R: int = 24, params: list[np.ndarray] | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown net kind {kind!r}")
        self.kind, self.state_dim, self.hidden, self.cond_dim, self.R = kind, state_dim, hidden, cond_dim, R
        self.out_dim = state_dim if kind == "dense" else (GEOM_DIM if kind == "geometry" else MAT_DIM)
        self.in_main = main_width(kind, state_dim)
        if params is None:
            rng = np.random.default_rng(seed)
            fan = self.in_main + cond_dim
            params = [
                rng.standard_normal((self.in_main, hidden)) / np.sqrt(fan),
                rng.standard_normal((cond_dim, hidden)) / np.sqrt(fan),
                np.zeros(hidden),
                rng.standard_normal((hidden, hidden)) / np.sqrt(hidden),
                np.zeros(hidden),
                rng.standard_normal((hidden, self.out_dim)) * (0.1 / np.sqrt(hidden)),
                np.zeros(self.out_dim),
            ]
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        self._check()

    def _check(self):
        shapes = [p.shape for p in self.params]
        want = [(self.in_main, self.hidden), (self.cond_dim, self.hidden), (self.hidden,),
                (self.hidden, self.hidden), (self.hidden,), (self.hidden, self.out_dim), (self.out_dim,)]
        if shapes != want:
            raise ValueError(f"{self.kind} net parameter shapes {shapes} != {want}")

    def copy(self) -> "ToyNet":
        return ToyNet(self.kind, self.state_dim, self.hidden, self.cond_dim, R=self.R,
                      params=[p.copy() for p in self.params])

    def apply(self, tape: ad.Tape, P: list[ad.Node], main, cond) -> ad.Node:
        """``main``: (N, in_main); ``cond``: (D,) shared or (N, D) per row."""
        w1m, w1c, b1, w2, b2, w3, b3 = P
        bias = ad.affine(cond, w1c, b1)
        h = ad.tanh(ad.affine(main, w1m, bias))
        h = ad.tanh(ad.affine(h, w2, b2))
        return ad.affine(h, w3, b3)

    def velocity_on_tape(self, tape: ad.Tape, P: list[ad.Node], main, cond, x: np.ndarray, t) -> ad.Node:
        """Velocity for states ``x`` (N, out) at time(s) ``t`` (scalar or (N,))."""
        clean = self.apply(tape, P, main, cond)
        inv = 1.0 / np.maximum(np.asarray(t, dtype=np.float64), T_FLOOR)
        if inv.ndim == 0:
            return ad.scale(ad.sub(tape.const(x), clean), float(inv))
        return ad.mul(ad.sub(tape.const(x), clean), tape.const(np.broadcast_to(inv[:, None], x.shape)))

    def const_params(self, tape: ad.Tape) -> list[ad.Node]:
        return [tape.const(p) for p in self.params]

    # -- checkpoint -----------------------------------------------------------------

    def layer_matrices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        w1m, w1c, b1, w2, b2, w3, b3 = self.params
        return [(np.vstack([w1m, w1c]), b1), (w2, b2), (w3, b3)]

    def save(self, path) -> None:
        save_checkpoint(path, self)


def save_checkpoint(path, net: ToyNet) -> None:
    layers = net.layer_matrices()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(layers)))
        for w, b in layers:
            rows, cols = w.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", net.cond_dim))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, R: int = 24) -> ToyNet:
    """Load a net; its kind is inferred from the layer widths."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    off = 8
    try:
        (n_layers,) = struct.unpack_from("<I", data, off)
        off += 4
        layers = []
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", data, off)
            off += 8
            w = np.frombuffer(data, "<f8", rows * cols, off).reshape(rows, cols).astype(np.float64)
            off += 8 * rows * cols
            b = np.frombuffer(data, "<f8", cols, off).astype(np.float64)
            off += 8 * cols
            layers.append((w, b))
        (cond_dim,) = struct.unpack_from("<I", data, off)
        off += 4
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    if n_layers != 3:
        raise CheckpointError(f"{path}: expected 3 layers, got {n_layers}")
    (w1, b1), (w2, b2), (w3, b3) = layers
    in_main = w1.shape[0] - cond_dim
    hidden, out = w1.shape[1], w3.shape[1]
    kind = _infer_kind(in_main, out)
    return ToyNet(kind, out, hidden, cond_dim, R=R,
                 params=[w1[:in_main], w1[in_main:], b1, w2, b2, w3, b3])


def _infer_kind(in_main: int, out: int) -> str:
    for kind in KINDS:
        if main_width(kind, out) == in_main:
            return kind
    raise CheckpointError(f"cannot infer net kind from input width {in_main}, output width {out}")


# -- velocity-field adapters ---------------------------------------------------

class DenseVelocityNet(VelocityField):
    """Stage-1 velocity field over ``(C, R, R)`` latents; differentiable in the embedding."""
    differentiable = True

    def __init__(self, net: ToyNet, channels: int = 1):
        if net.kind != "dense":
            raise ValueError("DenseVelocityNet needs a dense ToyNet")
        R = int(round(np.sqrt(net.state_dim / channels)))
        if channels * R * R != net.state_dim:
            raise ValueError("state width is not C*R*R")
        self.net = net
        self.state_shape = (channels, R, R)
        self.cond_dim = net.cond_dim

    def _main(self, xb, t):
        return np.concatenate([xb, np.broadcast_to(time_features(t), (xb.shape[0], N_TIME))], axis=1)

    def on_tape(self, tape, xb, t, e):
        return self.net.velocity_on_tape(tape, self.net.const_params(tape), tape.const(self._main(xb, t)), e, xb, t)

    def velocity(self, xb, t, e):
        tape = ad.Tape()
        return self.on_tape(tape, xb, t, tape.const(e)).value


class SparseTokenField(VelocityField):
    """Sparse-stage velocity over the tokens of one fixed coordinate set.

    Each token sees its own state, the mean-pooled state of all tokens,
    coordinate sinusoids, time features and the global condition (and, for
    material nets, the geometry token at the same coordinate).
    """

    def __init__(self, net: ToyNet, coords: np.ndarray, geometry: np.ndarray | None = None):
        if net.kind == "dense":
            raise ValueError("SparseTokenField needs a sparse ToyNet")
        if (net.kind == "material") != (geometry is not None):
            raise ValueError("material nets need geometry context; geometry nets take none")
        self.net = net
        self.coords = np.asarray(coords, dtype=np.int64)
        n = len(self.coords)
        if n == 0:
            raise ValueError("empty coordinate set")
        self.state_shape = (n, net.out_dim)
        self.cond_dim = net.cond_dim
        static = [coord_features(self.coords, net.R)]
        if geometry is not None:
            static.append(np.asarray(geometry, dtype=np.float64).reshape(n, GEOM_DIM))
        self._static = np.concatenate(static, axis=1)

    def velocity(self, xb, t, e):
        n, d = self.state_shape
        out = np.empty_like(xb)
        tape = ad.Tape()
        P = self.net.const_params(tape)
        tf = np.broadcast_to(time_features(t), (n, N_TIME))
        for i, flat in enumerate(xb):
            z = flat.reshape(n, d)
            pooled = np.broadcast_to(z.mean(axis=0), (n, d))
            main = np.concatenate([z, pooled, self._static, tf], axis=1)
            out[i] = self.net.velocity_on_tape(tape, P, tape.const(main), tape.const(e), z, t).value.reshape(-1)
        return out


@dataclass
class SparseSampler:
    """Sparse-stage rectified-flow sampler ``(coords; eps, c) -> slat``.

    ``calls`` counts invocations (one per full sampling run).
    """
    net: ToyNet
    steps: int = 25
    omega: float = 1.0
    phi: np.ndarray | None = None
    calls: int = 0

    def __call__(self, coords: np.ndarray, eps: np.ndarray, c, geometry: np.ndarray | None = None) -> SparseSlat:
        self.calls += 1
        fieldv = SparseTokenField(self.net, coords, geometry)
        phi = np.zeros(self.net.cond_dim) if self.phi is None else self.phi
        z = euler_sample(fieldv, Schedule.sampling(self.steps), eps, cond_values(c), phi, self.omega)
        return SparseSlat(coords, z, self.net.kind)
