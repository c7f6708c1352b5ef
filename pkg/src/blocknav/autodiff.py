"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly the op set the training losses need: affine layers, ReLU,
concatenation, row gather/scatter, sums of squares, and the velocity clamp.
Gradients accumulate in float64. The tape is walked iteratively, so deep
recurrent unrolls cannot hit the recursion limit.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteLoss


class Tensor:
    """A node in the computation graph: a value plus how to push grads back."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def constant(value) -> Tensor:
    return Tensor(value)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents before children; walk reversed for backprop


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from `loss` (a scalar)."""
    if loss.value.shape != ():
        raise NonFiniteLoss(f"loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise NonFiniteLoss(f"loss is {loss.value}")
    order = _toposort(loss)
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._vjp is None:
            continue
        for parent, contribution in zip(node._parents, node._vjp(node.grad)):
            parent.grad += contribution


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b with w of shape (out, in) and b of shape (out,)."""
    value = x.value @ w.value.T + b.value

    def vjp(g):
        return g @ w.value, g.T @ x.value, g.sum(axis=0)

    return Tensor(value, (x, w, b), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0.0

    def vjp(g):
        return (g * mask,)

    return Tensor(np.where(mask, x.value, 0.0), (x,), vjp)


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)

    def vjp(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(x.value[idx], (x,), vjp)


def scatter_sum(x: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Row-wise sum of x into n_rows bins given by idx."""
    idx = np.asarray(idx)
    value = np.zeros((n_rows,) + x.value.shape[1:], dtype=np.float64)
    np.add.at(value, idx, x.value)

    def vjp(g):
        return (g[idx],)

    return Tensor(value, (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return g, g

    return Tensor(a.value + b.value, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return g, -g

    return Tensor(a.value - b.value, (a, b), vjp)


def scale(x: Tensor, s: float) -> Tensor:
    def vjp(g):
        return (g * s,)

    return Tensor(x.value * s, (x,), vjp)


def sum_squares(x: Tensor) -> Tensor:
    def vjp(g):
        return (2.0 * x.value * g,)

    return Tensor(np.sum(x.value * x.value), (x,), vjp)


def clamp_rows(v: Tensor, v_max: float, eps: float) -> Tensor:
    """Row-wise speed clamp v / max(1, (|v| + eps) / v_max).

    Where |v| + eps <= v_max this is the identity (gradient passes through);
    elsewhere the scaled branch y = v * v_max / (|v| + eps) is differentiated
    analytically. Zero-norm rows always take the identity branch for any
    eps <= v_max.
    """
    norms = np.hypot(v.value[:, 0], v.value[:, 1])
    denom = norms + eps
    scaled = denom > v_max
    factor = np.where(scaled, v_max / denom, 1.0)
    value = v.value * factor[:, None]

    def vjp(g):
        out = g * factor[:, None]
        if scaled.any():
            # d/dv [v * vmax/(|v|+eps)] = vmax/(|v|+eps) I - vmax/((|v|+eps)^2 |v|) v v^T
            safe_norm = np.where(norms > 0.0, norms, 1.0)
            coef = v_max / (denom * denom * safe_norm)
            dots = (v.value * g).sum(axis=1)
            correction = coef * dots
            out = out - np.where(scaled, correction, 0.0)[:, None] * v.value
        return (out,)

    return Tensor(value, (v,), vjp)
