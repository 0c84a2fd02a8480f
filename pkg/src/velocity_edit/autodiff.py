"""Tape-based reverse-mode autodiff over float64 numpy arrays, plus Adam.

A :class:`Tape` is created per computation; leaves are registered with
:meth:`Tape.param` (gradients wanted) or :meth:`Tape.const`.  Every primitive
records one entry holding its input ids, its output id and a vector-Jacobian
rule.  :func:`backward` walks the entries in reverse exactly once.

    tape = Tape()
    w = tape.param(np.array([3.0, 4.0]))
    loss = sq_norm(w)
    grads = backward(tape, loss)      # {w.id: array([6., 8.])}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError", "NonFiniteError", "Node", "Tape", "backward",
    "add", "sub", "mul", "neg", "scale", "matmul", "affine", "tanh", "relu",
    "sum", "mean", "sq_norm", "concat", "reshape",
    "AdamState", "adam_step",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("tape", "id", "value", "requires_grad", "is_param")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray, requires_grad: bool, is_param: bool = False):
        self.tape = tape
        self.id = id
        self.value = value
        self.requires_grad = requires_grad
        self.is_param = is_param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        kind = "param" if self.is_param else ("var" if self.requires_grad else "const")
        return f"Node(id={self.id}, {kind}, shape={self.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)
    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return neg(self)


@dataclass
class _Entry:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Single-use record of primitive ops, in topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.entries: list[_Entry] = []

    def _new(self, value: np.ndarray, requires_grad: bool, is_param: bool = False) -> Node:
        node = Node(self, len(self.nodes), value, requires_grad, is_param)
        self.nodes.append(node)
        return node

    def param(self, value) -> Node:
        return self._new(_as_array(value, "param"), True, True)

    def const(self, value) -> Node:
        return self._new(_as_array(value, "const"), False)

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.const(x)

    def record(self, op: str, inputs: Sequence[Node], value: np.ndarray, vjp) -> Node:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op}: non-finite output")
        requires = any(n.requires_grad for n in inputs)
        out = self._new(value, requires)
        if requires:
            self.entries.append(_Entry(op, tuple(n.id for n in inputs), out.id, vjp))
        return out

    @property
    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.is_param]


def _as_array(x, op: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite input")
    return arr


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _same_shape("add", a, b)
    return tape.record("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _same_shape("sub", a, b)
    return tape.record("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return tape.record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def neg(a: Node) -> Node:
    return a.tape.record("neg", (a,), -a.value, lambda g: (-g,))


def scale(a: Node, c: float) -> Node:
    return a.tape.record("scale", (a,), c * a.value, lambda g: (c * g,))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape.record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape.record("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return (g @ bv.T if na else None), (av.T @ g if nb else None)
        if av.ndim == 1 and bv.ndim == 2:
            return (bv @ g if na else None), (np.outer(av, g) if nb else None)
        if av.ndim == 2:
            return (np.outer(g, bv) if na else None), (av.T @ g if nb else None)
        return g * bv, g * av

    return tape.record("matmul", (a, b), av @ bv, vjp)


def affine(x, w, b) -> Node:
    """``x @ w + b``.  ``b`` has the output's trailing width (broadcast over rows)
    or the full output shape."""
    tape = _tape_of(x, w, b)
    x, w, b = tape.lift(x), tape.lift(w), tape.lift(b)
    if w.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: incompatible shapes x{x.shape} w{w.shape}")
    xv, wv = x.value, w.value
    y = xv @ wv
    if b.shape != y.shape and b.shape != (wv.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not fit output {y.shape}")
    broadcast = b.shape != y.shape
    nx, nw = x.requires_grad, w.requires_grad

    def vjp(g):
        gx = g @ wv.T if nx else None
        gw = (np.outer(xv, g) if xv.ndim == 1 else xv.T @ g) if nw else None
        gb = g.sum(axis=0) if broadcast and g.ndim == 2 else g
        return gx, gw, gb

    return tape.record("affine", (x, w, b), y + b.value, vjp)


# -- reductions --------------------------------------------------------------

def sum(a: Node) -> Node:  # noqa: A001
    shape = a.shape
    return a.tape.record("sum", (a,), np.asarray(a.value.sum()), lambda g: (np.full(shape, float(g)),))


def mean(a: Node) -> Node:
    shape, n = a.shape, a.value.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    return a.tape.record("mean", (a,), np.asarray(a.value.mean()), lambda g: (np.full(shape, float(g) / n),))


def sq_norm(a: Node) -> Node:
    av = a.value
    return a.tape.record("sq_norm", (a,), np.asarray(np.sum(av * av)), lambda g: (2.0 * float(g) * av,))


# -- structural ----------------------------------------------------------------

def concat(parts: Sequence, axis: int = -1) -> Node:
    tape = _tape_of(*parts)
    nodes = [tape.lift(p) for p in parts]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[n.shape for n in nodes]}: {exc}") from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return tape.record("concat", nodes, value, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a: Node, shape) -> Node:
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return a.tape.record("reshape", (a,), value, lambda g: (g.reshape(old),))


# -- backward ----------------------------------------------------------------

def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` for every param leaf on ``tape``, keyed by node id."""
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ValueError("loss is not a node on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        for nid, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None or not tape.nodes[nid].requires_grad:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    out = {}
    for node in tape.params:
        g = grads.get(node.id)
        out[node.id] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64).reshape(node.shape)
    return out


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              lr: float | None = None) -> list[np.ndarray]:
    """One bias-corrected Adam update.  Returns new parameter arrays; ``state`` is advanced in place."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: param {i} shape {p.shape}, grad {g.shape}, moment {state.m[i].shape}")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        new.append(p - (lr / bc1) * m / denom)
    return new
