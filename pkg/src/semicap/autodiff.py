"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every value is a ``(rows, cols)`` array; scalars are ``(1, 1)``.  A tape is
built dynamically by calling the op functions below on :class:`Node`
objects and discarded after :func:`backward`.  Ops refuse to produce
non-finite values and name themselves in the error.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Node", "NumericError", "ShapeError", "ContractError",
    "constant", "parameter", "no_grad", "is_grad_enabled", "backward",
    "add", "sub", "mul", "neg", "scale", "matmul", "add_bias", "linear",
    "relu", "tanh", "sigmoid", "log_sigmoid", "softmax_rows", "log_softmax_rows",
    "log", "concat_cols", "slice_cols", "concat_rows", "slice_rows",
    "mean", "sum", "row_sum", "row_norm", "sq_frobenius", "stop_gradient",
]

_GRAD_ENABLED = True


class NumericError(FloatingPointError):
    """A NaN or infinity was produced by an op."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An op was called outside its contract (e.g. backward on a non-scalar)."""


@contextmanager
def no_grad():
    """Evaluate ops without recording parents (forward-only, no tape)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """A value on the tape plus what is needed to push gradients to its parents."""

    __slots__ = ("value", "_grad", "parents", "backward_fn", "op", "requires_grad", "name")

    def __init__(self, value, parents: tuple = (), backward_fn: Optional[Callable] = None,
                 op: str = "leaf", requires_grad: bool = False, name: Optional[str] = None):
        self.value = value
        self._grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


def constant(x, name: Optional[str] = None) -> Node:
    """Wrap data as a node that never receives gradients."""
    if isinstance(x, Node):
        return x
    return Node(_as_array(x), name=name, op="const")


def parameter(x, name: Optional[str] = None) -> Node:
    """Wrap data as a learnable leaf."""
    return Node(_as_array(x).copy(), name=name, op="param", requires_grad=True)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _check_finite(value: np.ndarray, op: str) -> None:
    # a sum is finite only if every entry is; far cheaper than an elementwise mask
    if not math.isfinite(np.add.reduce(value, None)):
        raise NumericError(f"non-finite value produced by op '{op}'")


def _make(value: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Node:
    _check_finite(value, op)
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                return Node(value, parents, backward_fn, op, requires_grad=True)
    return Node(value, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a: Node, b: Node, op: str) -> None:
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def neg(a) -> Node:
    a = _lift(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Node:
    a = _lift(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add_bias(x, b) -> Node:
    x, b = _lift(x), _lift(b)
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"add_bias: bias shape {b.shape} does not fit input {x.shape}")
    return _make(x.value + b.value, (x, b),
                 lambda g: (g, g.sum(axis=0, keepdims=True)), "add_bias")


def linear(x, W, b) -> Node:
    """Fused ``x @ W + b`` with a (1, out) bias row."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    xv, Wv, bv = x.value, W.value, b.value
    if xv.shape[1] != Wv.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {xv.shape} and {Wv.shape}")
    if bv.shape != (1, Wv.shape[1]):
        raise ShapeError(f"linear: bias shape {bv.shape} does not fit weight {Wv.shape}")
    return _make(xv @ Wv + bv, (x, W, b),
                 lambda g: (g @ Wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)), "linear")


# ---------------------------------------------------------------------------
# nonlinearities

def relu(x) -> Node:
    x = _lift(x)
    # subgradient 0 at exactly 0
    mask = x.value > 0
    return _make(x.value * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Node:
    x = _lift(x)
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(v))
    r = 1.0 / (1.0 + e)
    return np.where(v >= 0, r, e * r)


def sigmoid(x) -> Node:
    x = _lift(x)
    y = _sigmoid(x.value)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(x) -> Node:
    """``log(sigmoid(x))`` without overflow; ``log(1 - sigmoid(x)) == log_sigmoid(-x)``."""
    x = _lift(x)
    v = x.value
    y = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    s = _sigmoid(-v)
    return _make(y, (x,), lambda g: (g * s,), "log_sigmoid")


def softmax_rows(x) -> Node:
    x = _lift(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax_rows")


def log_softmax_rows(x) -> Node:
    x = _lift(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax_rows")


def log(x) -> Node:
    x = _lift(x)
    v = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(v)
    return _make(y, (x,), lambda g: (g / v,), "log")


def lstm_cell(z, c) -> Node:
    """Fused LSTM gate update.

    ``z`` holds the (B, 4H) gate pre-activations in the order input,
    forget, cell, output; ``c`` is the (B, H) previous cell state.  Returns
    the (B, 2H) block ``[h_new | c_new]``.
    """
    z, c = _lift(z), _lift(c)
    n = c.shape[1]
    if z.shape != (c.shape[0], 4 * n):
        raise ShapeError(f"lstm_cell: gate shape {z.shape} does not fit cell state {c.shape}")
    zv, cv = z.value, c.value
    s = _sigmoid(zv)
    i, f, o = s[:, :n], s[:, n:2 * n], s[:, 3 * n:]
    g = np.tanh(zv[:, 2 * n:3 * n])
    c_new = f * cv + i * g
    tc = np.tanh(c_new)

    def bw(grad):
        gh, gc = grad[:, :n], grad[:, n:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([dc * g * i * (1.0 - i), dc * cv * f * (1.0 - f),
                             dc * i * (1.0 - g * g), gh * tc * o * (1.0 - o)], axis=1)
        return dz, dc * f

    return _make(np.concatenate([o * tc, c_new], axis=1), (z, c), bw, "lstm_cell")


# ---------------------------------------------------------------------------
# structural

def concat_cols(*nodes) -> Node:
    nodes = tuple(_lift(n) for n in nodes)
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _make(np.concatenate([n.value for n in nodes], axis=1), nodes, bw, "concat_cols")


def concat_rows(*nodes) -> Node:
    nodes = tuple(_lift(n) for n in nodes)
    cols = {n.shape[1] for n in nodes}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ: {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _make(np.concatenate([n.value for n in nodes], axis=0), nodes, bw, "concat_rows")


def slice_cols(x, start: int, stop: int) -> Node:
    x = _lift(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(x.value[:, start:stop], (x,), bw, "slice_cols")


def slice_rows(x, start: int, stop: int) -> Node:
    x = _lift(x)
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(x.value[start:stop], (x,), bw, "slice_rows")


# ---------------------------------------------------------------------------
# reductions

def mean(x) -> Node:
    x = _lift(x)
    shape, n = x.shape, x.value.size
    return _make(np.array([[x.value.mean()]]), (x,),
                 lambda g: (np.full(shape, g[0, 0] / n),), "mean")


def sum(x) -> Node:  # noqa: A001 - mirrors numpy naming
    x = _lift(x)
    shape = x.shape
    return _make(np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def row_sum(x) -> Node:
    """Sum across columns, giving a (rows, 1) column."""
    x = _lift(x)
    shape = x.shape
    return _make(x.value.sum(axis=1, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "row_sum")


def row_norm(x) -> Node:
    """Euclidean norm of each row, (rows, 1); subgradient 0 for an all-zero row."""
    x = _lift(x)
    v = x.value
    n = np.sqrt((v * v).sum(axis=1, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    return _make(n, (x,), lambda g: (np.where(n > 0, g * v / safe, 0.0),), "row_norm")


def sq_frobenius(x) -> Node:
    x = _lift(x)
    v = x.value
    return _make(np.array([[np.sum(v * v)]]), (x,), lambda g: (2.0 * g[0, 0] * v,), "sq_frobenius")


def stop_gradient(x) -> Node:
    """Pass the value forward and block gradient flow."""
    x = _lift(x)
    return Node(x.value, op="stop_gradient")


# ---------------------------------------------------------------------------
# reverse pass

def _topo_order(root: Node) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, wrt: Optional[Iterable[Node]] = None) -> dict:
    """Propagate d(loss)/d(node) through the tape.

    Each leaf reached gets its ``grad`` overwritten.  Returns a map from
    leaf node to gradient; when ``wrt`` is given the map covers exactly
    those nodes, with zeros for any the loss does not depend on.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1, 1) loss, got shape {loss.shape}")
    grads = {id(loss): np.ones((1, 1))}
    leaves = {}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                leaves[id(node)] = (node, g)
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if not p.requires_grad or pg is None:
                    continue
                if not math.isfinite(np.add.reduce(pg, None)):
                    raise NumericError(f"non-finite gradient produced by op '{node.op}'")
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    for node, g in leaves.values():
        node.grad = g
    if wrt is None:
        return {node: g for node, g in leaves.values()}
    out = {}
    for node in wrt:
        hit = leaves.get(id(node))
        out[node] = hit[1] if hit is not None else np.zeros_like(node.value)
    return out


def grad_map(loss: Node, params: Sequence[Node]) -> list:
    """Gradients of ``loss`` for ``params`` in order (zeros where unreachable)."""
    g = backward(loss, params)
    return [g[p] for p in params]
