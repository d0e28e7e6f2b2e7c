"""Dense reverse-mode automatic differentiation on float64 numpy buffers.

Graphs are built per forward pass (define-by-run). Each op returns a new
`Tensor` holding its parents and a closure that pushes the upstream gradient
back to them.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, value, requires_grad=False, name=None, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn, op):
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=req, parents=parents if req else (), backward_fn=backward_fn if req else None, op=op)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


# ------------------------------------------------------------------ ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _node(a.value @ b.value, (a, b), bw, "matmul")


def _row_broadcast_reduce(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def _check_add_shapes(a, b, op):
    if a.shape == b.shape:
        return
    ok = a.value.ndim == 2 and b.value.ndim in (1, 2) and b.shape[-1] == a.shape[1] and b.size == a.shape[1]
    if not ok:
        raise ValueError(f"{op} shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise sum; `b` may be a bias row broadcast over the rows of `a`."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.value.ndim > a.value.ndim:
        a, b = b, a
    _check_add_shapes(a, b, "add")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, _row_broadcast_reduce(g, b.shape))

    return _node(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_add_shapes(a, b, "sub")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -_row_broadcast_reduce(g, b.shape))

    return _node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return _node(a.value * b.value, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        _accumulate(a, c * g)

    return _node(c * a.value, (a,), bw, "scale")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat shape mismatch: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _node(value, ts, bw, "concat")


def concat_rows(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=0)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise ValueError(f"row slice [{start}:{stop}] out of range for {a.shape}")

    def bw(g):
        full = np.zeros_like(a.value)
        full[start:stop] = g
        _accumulate(a, full)

    return _node(a.value[start:stop], (a,), bw, "slice_rows")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.value.reshape(shape), (a,), bw, "reshape")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)

    def bw(g):
        _accumulate(a, g * out)

    return _node(out, (a,), bw, "exp")


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, 2.0 * a.value * g)

    return _node(a.value * a.value, (a,), bw, "square")


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, np.full(a.shape, float(g)))

    return _node(a.value.sum(), (a,), bw, "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.size

    def bw(g):
        _accumulate(a, np.full(a.shape, float(g) / n))

    return _node(a.value.mean(), (a,), bw, "mean")


def elu(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    neg = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)

    def bw(g):
        _accumulate(a, g * np.where(x > 0, 1.0, neg + 1.0))

    return _node(out, (a,), bw, "elu")


class SparseOperator:
    """Fixed sparse matrix with its transpose cached for the backward pass."""

    def __init__(self, matrix):
        self.matrix = sparse.csr_matrix(matrix)
        self.matrix.sort_indices()
        self.T = self.matrix.T.tocsr()
        self.T.sort_indices()

    @property
    def shape(self):
        return self.matrix.shape


def spmm(op, b) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    if not isinstance(op, SparseOperator):
        op = SparseOperator(op)
    b = as_tensor(b)
    if b.shape[0] != op.shape[1]:
        raise ValueError(f"spmm shape mismatch {op.shape} @ {b.shape}")

    def bw(g):
        _accumulate(b, op.T @ g)

    return _node(op.matrix @ b.value, (b,), bw, "spmm")


# ------------------------------------------------------------- backward


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every tensor reachable from `loss` that requires it.

    Leaf gradients accumulate across calls; intermediate buffers are released.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            node.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences."""
    x.grad = None
    x.requires_grad = True
    backward(f(x))
    analytic = np.zeros_like(x.value) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.value)
    flat = x.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).value)
        flat[i] = orig - h
        fm = float(f(x).value)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    x.grad = None
    return relative_error(analytic, numeric)


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max())
