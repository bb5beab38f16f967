"""Dense-matrix reverse-mode autodiff.

Every op returns a new :class:`Variable` holding a float64 numpy array and a
closure that pushes the output adjoint back onto its parents.  ``backward``
walks the graph in reverse topological order.  Gradients accumulate until
:func:`zero_grads` is called.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Variable:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        self.value = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self._parents: tuple[Variable, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Variable(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __rsub__(self, other):
        return subtract(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c: float):
        if isinstance(c, Variable):
            return multiply(self, c)
        return scale(self, float(c))

    __rmul__ = __mul__

    @property
    def T(self) -> Variable:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _node(value: np.ndarray, parents: Sequence[Variable], fn) -> Variable:
    out = Variable.__new__(Variable)
    out.value = value
    out.grad = np.zeros_like(value)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = fn if out.requires_grad else None
    out.name = ""
    return out


def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(value) into every reachable ``requires_grad`` Variable."""
    if loss.value.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(loss, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v._parents:
            if id(p) not in seen:
                stack.append((p, False))
    # intermediate adjoints are local to this pass; leaves keep accumulating
    adj = {id(v): np.zeros_like(v.value) for v in order if v._backward is not None}
    adj[id(loss)] = np.ones_like(loss.value)
    for v in reversed(order):
        if v._backward is None:
            if v is loss and v.requires_grad:
                v.grad += 1.0
            continue
        g = adj.pop(id(v))
        v.grad += g
        v._backward(g, adj)


def _push(parent: Variable, g: np.ndarray, adj: dict) -> None:
    if not parent.requires_grad:
        return
    if parent._backward is None:
        parent.grad += g
    else:
        adj[id(parent)] += g


def zero_grads(params: Iterable[Variable]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


# ---------------------------------------------------------------- ops


def matmul(a: Variable, b: Variable) -> Variable:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def fn(g, adj):
        _push(a, g @ b.value.T, adj)
        _push(b, a.value.T @ g, adj)

    return _node(a.value @ b.value, (a, b), fn)


def transpose(a: Variable) -> Variable:
    def fn(g, adj):
        _push(a, g.T, adj)

    return _node(np.ascontiguousarray(a.value.T), (a,), fn)


def _same_shape(op: str, a: Variable, b: Variable) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def add(a: Variable, b: Variable) -> Variable:
    _same_shape("add", a, b)

    def fn(g, adj):
        _push(a, g, adj)
        _push(b, g, adj)

    return _node(a.value + b.value, (a, b), fn)


def subtract(a: Variable, b: Variable) -> Variable:
    _same_shape("subtract", a, b)

    def fn(g, adj):
        _push(a, g, adj)
        _push(b, -g, adj)

    return _node(a.value - b.value, (a, b), fn)


def multiply(a: Variable, b: Variable) -> Variable:
    """Elementwise product of equal shapes."""
    _same_shape("multiply", a, b)

    def fn(g, adj):
        _push(a, g * b.value, adj)
        _push(b, g * a.value, adj)

    return _node(a.value * b.value, (a, b), fn)


def scale(a: Variable, c: float) -> Variable:
    def fn(g, adj):
        _push(a, c * g, adj)

    return _node(c * a.value, (a,), fn)


def add_scalar(a: Variable, c: float) -> Variable:
    def fn(g, adj):
        _push(a, g, adj)

    return _node(a.value + c, (a,), fn)


def exp(a: Variable) -> Variable:
    out = np.exp(a.value)

    def fn(g, adj):
        _push(a, g * out, adj)

    return _node(out, (a,), fn)


def log(a: Variable) -> Variable:
    def fn(g, adj):
        _push(a, g / a.value, adj)

    return _node(np.log(a.value), (a,), fn)


def abs_(a: Variable) -> Variable:
    # sign(0) = 0: subgradient zero at ties
    def fn(g, adj):
        _push(a, g * np.sign(a.value), adj)

    return _node(np.abs(a.value), (a,), fn)


def square(a: Variable) -> Variable:
    def fn(g, adj):
        _push(a, 2.0 * a.value * g, adj)

    return _node(a.value * a.value, (a,), fn)


def softmax_rows(a: Variable) -> Variable:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g, adj):
        _push(a, p * (g - (g * p).sum(axis=1, keepdims=True)), adj)

    return _node(p, (a,), fn)


def sum_all(a: Variable) -> Variable:
    def fn(g, adj):
        _push(a, np.full_like(a.value, g.item()), adj)

    return _node(np.array([[a.value.sum()]]), (a,), fn)


def mean_all(a: Variable) -> Variable:
    return scale(sum_all(a), 1.0 / a.value.size)


def sum_rows(a: Variable) -> Variable:
    """Sum over columns, one value per row: [p×k] -> [p×1]."""
    def fn(g, adj):
        _push(a, np.broadcast_to(g, a.shape).copy(), adj)

    return _node(a.value.sum(axis=1, keepdims=True), (a,), fn)


def mean_rows(a: Variable) -> Variable:
    return scale(sum_rows(a), 1.0 / a.shape[1])


def diag_left(d: Variable, x: Variable) -> Variable:
    """diag(d) @ x for a column vector d of length x.shape[0]."""
    if d.shape != (x.shape[0], 1):
        raise ShapeError(f"diag_left: diagonal {d.shape} does not fit {x.shape}")

    def fn(g, adj):
        _push(d, (g * x.value).sum(axis=1, keepdims=True), adj)
        _push(x, d.value * g, adj)

    return _node(d.value * x.value, (d, x), fn)


def slice_rows(a: Variable, start: int, stop: int) -> Variable:
    def fn(g, adj):
        full = np.zeros_like(a.value)
        full[start:stop] = g
        _push(a, full, adj)

    return _node(a.value[start:stop].copy(), (a,), fn)


def slice_cols(a: Variable, start: int, stop: int) -> Variable:
    def fn(g, adj):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        _push(a, full, adj)

    return _node(a.value[:, start:stop].copy(), (a,), fn)


def concat_rows(parts: Sequence[Variable]) -> Variable:
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: column counts differ, {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def fn(g, adj):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _push(p, g[lo:hi], adj)

    return _node(np.concatenate([p.value for p in parts], axis=0), tuple(parts), fn)


def concat_cols(parts: Sequence[Variable]) -> Variable:
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise ShapeError(f"concat_cols: row counts differ, {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def fn(g, adj):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _push(p, g[:, lo:hi], adj)

    return _node(np.concatenate([p.value for p in parts], axis=1), tuple(parts), fn)


def reshape(a: Variable, shape: tuple[int, int]) -> Variable:
    """Row-major reshape; used to flatten token matrices into one row per sample."""
    def fn(g, adj):
        _push(a, g.reshape(a.shape), adj)

    return _node(a.value.reshape(shape).copy(), (a,), fn)


def softplus(a: Variable) -> Variable:
    """log(1 + e^a), evaluated without overflow; derivative is the logistic."""
    def fn(g, adj):
        _push(a, g * _logistic(a.value), adj)

    return _node(np.logaddexp(0.0, a.value), (a,), fn)


def _logistic(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


# ---------------------------------------------------------------- checking


def grad_check(
    f: Callable[[Variable], Variable], x: np.ndarray, h: float = 1e-5
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    xv = Variable(x.copy(), requires_grad=True)
    out = f(xv)
    if not np.isfinite(out.value).all():
        raise FloatingPointError("f(x) is not finite")
    backward(out)
    analytic = xv.grad.reshape(-1)
    base = xv.value.copy()
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = f(Variable(plus.reshape(base.shape))).item()
        fm = f(Variable(minus.reshape(base.shape))).item()
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
