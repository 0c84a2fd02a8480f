"""Conditional flow-matching training for the toy nets.

Loss: mean squared error between ``v((1 - t) x0 + t eps, t, c)`` and ``eps - x0``,
with the condition replaced by the null embedding (zeros) at rate
``cond_dropout`` so the nets support classifier-free guidance.  By default each
residual is weighted by ``max(t, T_FLOOR)``, which keeps the small-``t`` terms
of the clean-sample head from dominating the gradient; the minimizer is the
same conditional mean either way.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .nets import N_TIME, T_FLOOR, ToyNet, coord_features, time_features
from .shapes import embed_condition, gen_shape, sample_params

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Batch:
    main: np.ndarray
    cond: np.ndarray
    target: np.ndarray      # eps - x0
    state: np.ndarray       # x_t, one row per sample or token
    t: np.ndarray           # per row


@dataclass
class ShapeDataset:
    """Random shapes rendered for one net kind.

    Shapes come from a bank of ``bank_size`` pre-rendered parameter sets drawn
    with ``bank_seed``; the training rng picks bank entries, noise and times.
    """
    kind: str = "dense"
    R: int = 24
    size: int = 32          # dense: samples; sparse: shapes (all tokens of each)
    hat_prob: float = 0.5
    cond_dropout: float = 0.1
    bank_size: int = 4096
    bank_seed: int = 12345
    _bank: list | None = field(default=None, init=False, repr=False)

    def _ensure_bank(self):
        if self._bank is None:
            rng = np.random.default_rng(self.bank_seed)
            params = [sample_params(rng, self.hat_prob) for _ in range(self.bank_size)]
            self._bank = [(p, gen_shape(p, self.R), embed_condition(p).values) for p in params]
            if self.kind == "dense":
                self._x0 = np.stack([s.stage1.reshape(-1) for _, s, _ in self._bank])
                self._cond = np.stack([c for _, _, c in self._bank])

    def batch(self, rng: np.random.Generator) -> Batch:
        self._ensure_bank()
        idx = rng.integers(0, self.bank_size, self.size)
        if self.kind == "dense":
            return self._dense(rng, idx)
        return self._sparse(rng, idx)

    def _drop(self, rng, cond):
        cond = cond.copy()
        cond[rng.random(len(cond)) < self.cond_dropout] = 0.0
        return cond

    def _dense(self, rng, idx):
        x0 = self._x0[idx]
        eps = rng.standard_normal(x0.shape)
        t = rng.random(len(idx))
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * eps
        main = np.concatenate([xt, time_features(t)], axis=1)
        return Batch(main, self._drop(rng, self._cond[idx]), eps - x0, xt, t)

    def _sparse(self, rng, idx):
        cond_rows = self._drop(rng, np.stack([self._bank[i][2] for i in idx]))
        mains, conds, targets, states, times = [], [], [], [], []
        for i, c in zip(idx, cond_rows):
            shape = self._bank[i][1]
            slat = shape.geom if self.kind == "geometry" else shape.mat
            x0 = slat.feats
            n = len(x0)
            eps = rng.standard_normal(x0.shape)
            t = rng.random()
            zt = (1.0 - t) * x0 + t * eps
            parts = [zt, np.broadcast_to(zt.mean(axis=0), zt.shape), coord_features(slat.coords, self.R)]
            if self.kind == "material":
                parts.append(shape.geom.feats)
            parts.append(np.broadcast_to(time_features(t), (n, N_TIME)))
            mains.append(np.concatenate(parts, axis=1))
            conds.append(np.broadcast_to(c, (n, c.size)))
            targets.append(eps - x0)
            states.append(zt)
            times.append(np.full(n, t))
        return Batch(np.concatenate(mains), np.concatenate(conds), np.concatenate(targets),
                     np.concatenate(states), np.concatenate(times))


@dataclass
class FixedDataset:
    """Always returns the same regression pair (memorization check)."""
    fixed: Batch

    def batch(self, rng):
        return self.fixed


def cfm_loss(net: ToyNet, batch: Batch) -> float:
    tape = ad.Tape()
    out = net.velocity_on_tape(tape, net.const_params(tape), tape.const(batch.main), tape.const(batch.cond),
                               batch.state, batch.t)
    return float(np.mean((out.value - batch.target) ** 2))


@dataclass
class TrainResult:
    net: ToyNet
    losses: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        write_loss_csv(path, self.losses)


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def train_flow_matching(net: ToyNet, dataset, steps: int, seed: int = 0, lr: float = 1e-3,
                        cosine: bool = True, weighting: str = "clean", log_every: int = 0) -> TrainResult:
    """Adam on the flow-matching loss; the input net is not modified.

    ``weighting="clean"`` scales each residual by ``max(t, T_FLOOR)``, i.e. the
    squared error of the clean-sample head; ``"none"`` is the unweighted loss.
    """
    if weighting not in ("none", "clean"):
        raise ValueError(f"unknown weighting {weighting!r}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    net = net.copy()
    rng = np.random.default_rng(seed)
    state = ad.AdamState(lr=lr)
    losses: list[float] = []
    for step in range(steps):
        batch = dataset.batch(rng)
        try:
            tape = ad.Tape()
            P = [tape.param(p) for p in net.params]
            out = net.velocity_on_tape(tape, P, tape.const(batch.main), tape.const(batch.cond), batch.state, batch.t)
            resid = ad.sub(out, tape.const(batch.target))
            if weighting == "clean":
                w = np.maximum(batch.t, T_FLOOR)[:, None]
                resid = ad.mul(resid, tape.const(np.broadcast_to(w, resid.shape)))
            loss = ad.scale(ad.sq_norm(resid), 1.0 / batch.target.size)
            value = float(loss.value)
            grads = ad.backward(tape, loss)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from None
        rate = lr * 0.5 * (1.0 + math.cos(math.pi * step / steps)) if cosine else lr
        net.params = ad.adam_step(state, net.params, [grads[p.id] for p in P], rate)
        losses.append(value)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, value)
    return TrainResult(net, losses)


VALIDATION_BANK_SEED = 777


def validation_batch(kind: str, size: int | None = None, seed: int = 999) -> Batch:
    """Held-out batch: shapes from a bank disjoint from the training bank, no condition dropout."""
    size = size or (256 if kind == "dense" else 32)
    ds = ShapeDataset(kind, size=size, cond_dropout=0.0, bank_size=max(size, 256), bank_seed=VALIDATION_BANK_SEED)
    return ds.batch(np.random.default_rng(seed))


def new_net(kind: str, hidden: int, seed: int = 0, R: int = 24) -> ToyNet:
    state = R * R if kind == "dense" else 4
    return ToyNet(kind, state, hidden=hidden, seed=seed, R=R)


def train_toy(kind: str, steps: int, hidden: int, lr: float = 1e-3, batch: int = 32, seed: int = 0,
              weighting: str = "clean") -> tuple[TrainResult, float, float]:
    """Train a fresh net of ``kind``; returns the result and validation loss before and after."""
    net = new_net(kind, hidden, seed)
    val = validation_batch(kind)
    before = cfm_loss(net, val)
    result = train_flow_matching(net, ShapeDataset(kind, size=batch), steps, seed=seed + 1, lr=lr,
                                 weighting=weighting)
    return result, before, cfm_loss(result.net, val)
