"""Adam and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Node, backward


@dataclass
class AdamState:
    """Per-parameter moments plus a shared step counter."""

    lr: float = 5e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: Mapping[str, Node], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam step in place to every named parameter."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s): {', '.join(sorted(missing))}")
    state.t += 1
    bc1 = 1.0 - state.b1 ** state.t
    bc2 = 1.0 - state.b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.value.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.value.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * (g * g)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def finite_diff_check(f: Callable[[], Node], params: Sequence[Node], eps: float = 1e-3,
                      refine_above: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the loss from the current parameter values each call.
    Each coordinate is first compared with the second-order central
    difference at ``x +- eps``.  Where that disagrees by more than
    ``refine_above``, two more evaluations at ``x +- 2 eps`` give the
    fourth-order stencil (truncation O(eps^4)), whose error is used instead;
    this lets ``eps`` stay large enough that round-off sits far below small
    slopes.  Coordinates where any stencil point changes the sign pattern of
    the relu inputs or row norms on the tape (a kink inside the stencil,
    including one sitting exactly at ``x``) are skipped.  A
    coordinate whose analytic and numeric slopes are both below 1e-9 counts
    as exact, since round-off alone makes their ratio meaningless there.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def probe(p, i, offset):
        p.value.reshape(-1)[i] = offset
        out = f()
        return out.item(), _kink_signature(out)

    def rel(ana, numeric):
        if abs(ana) + abs(numeric) < 1e-9:
            return 0.0
        return abs(ana - numeric) / (abs(ana) + abs(numeric) + 1e-12)

    loss = f()
    base_sig = _kink_signature(loss)
    analytic = backward(loss, params)
    worst = 0.0
    for p in params:
        a = analytic[p].reshape(-1)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            (up, sig_up), (down, sig_down) = probe(p, i, orig + eps), probe(p, i, orig - eps)
            err = None
            if sig_up == sig_down == base_sig:
                err = rel(a[i], (up - down) / (2.0 * eps))
                if err > refine_above:
                    (up2, sig_up2), (down2, sig_down2) = probe(p, i, orig + 2 * eps), probe(p, i, orig - 2 * eps)
                    if sig_up2 == sig_down2 == sig_up:
                        err = rel(a[i], (8.0 * (up - down) - (up2 - down2)) / (12.0 * eps))
                    else:
                        err = None
            flat[i] = orig
            if err is not None:
                worst = max(worst, err)
    return worst


def _kink_signature(root: Node) -> tuple:
    """Sign pattern of every relu / row_norm input reachable from ``root``."""
    sig, seen, stack = [], set(), [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "relu":
            sig.append((node.parents[0].value > 0).tobytes())
        elif node.op == "row_norm":
            sig.append((node.value > 0).tobytes())
        stack.extend(node.parents)
    return tuple(sig)
