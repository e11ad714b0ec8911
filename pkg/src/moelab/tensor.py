"""Dense float64 tensors with reverse-mode differentiation.

A deliberately small op set: matmul, elementwise arithmetic, GELU, sigmoid,
softmax, reductions, reshape/permute, row gather and constant masking. Every
op is eager; the graph is the chain of parent links plus a global creation
counter, so backward() can replay nodes in exact reverse execution order.

Graph nodes are never mutated once built; the optimizer rebinds leaf data
between steps, after the graph of the previous step is gone. float64
everywhere: shapes are desk-scale and the precision keeps finite-difference
checks tight.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "evaluate",
    "backward",
    "finite_difference_grad",
    "matmul",
    "gelu",
    "sigmoid",
    "softmax",
    "take_rows",
    "broadcast_to",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's contract (e.g. non-scalar loss)."""


def _norm_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2))


def _norm_pdf(x: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _broadcastable(a: tuple, b: tuple) -> bool:
    # numpy trailing-aligned broadcasting; anything else is an error
    for da, db in zip(reversed(a), reversed(b)):
        if da != db and da != 1 and db != 1:
            return False
    return True


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` by summing over broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backward().

    `grad` is populated by backward() for every requires_grad tensor in the
    graph (ndarray of the same shape). Leaf tensors outside the graph keep
    grad=None; optimizers treat that as zero.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_order")

    _order_counter = itertools.count()

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _grad_fn: Callable[[np.ndarray], None] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._parents = _parents if self.requires_grad else ()
        self._grad_fn = _grad_fn if self.requires_grad else None
        self._order = next(Tensor._order_counter)

    # ------------------------------------------------------------------
    # basics

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ------------------------------------------------------------------
    # elementwise arithmetic (numpy trailing-aligned broadcasting only)

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def _binary(self, other, fwd, grad_a, grad_b) -> "Tensor":
        other = Tensor._coerce(other)
        if not _broadcastable(self.shape, other.shape):
            raise ShapeError(f"operands not broadcastable: {self.shape} vs {other.shape}")
        out_data = fwd(self.data, other.data)
        a, b = self, other

        def gfn(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(grad_a(g, a.data, b.data), a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(grad_b(g, a.data, b.data), b.shape))

        return Tensor(out_data, _parents=(a, b), _grad_fn=gfn)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, x, y: g, lambda g, x, y: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)

    def __rsub__(self, other):
        return Tensor._coerce(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)

    __rmul__ = __mul__

    def __neg__(self):
        return self.__mul__(-1.0)

    def __truediv__(self, other):
        return self._binary(
            other,
            np.divide,
            lambda g, x, y: g / y,
            lambda g, x, y: -g * x / (y * y),
        )

    def __matmul__(self, other):
        return matmul(self, other)

    def square(self) -> "Tensor":
        x = self

        def gfn(g):
            _accumulate(x, g * 2.0 * x.data)

        return Tensor(x.data * x.data, _parents=(x,), _grad_fn=gfn)

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def gfn(g):
            g = np.asarray(g)
            if axis is None:
                _accumulate(x, np.broadcast_to(g, x.shape).copy())
                return
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            if not keepdims:
                g = np.expand_dims(g, tuple(a % x.data.ndim for a in axes))
            _accumulate(x, np.broadcast_to(g, x.shape).copy())

        return Tensor(out, _parents=(x,), _grad_fn=gfn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ------------------------------------------------------------------
    # shape ops

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        out = x.data.reshape(shape)

        def gfn(g):
            _accumulate(x, g.reshape(x.shape))

        return Tensor(out, _parents=(x,), _grad_fn=gfn)

    def transpose(self, *perm) -> "Tensor":
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        if not perm:
            perm = tuple(reversed(range(self.data.ndim)))
        x = self
        inv = tuple(np.argsort(perm))

        def gfn(g):
            _accumulate(x, g.transpose(inv))

        return Tensor(x.data.transpose(perm), _parents=(x,), _grad_fn=gfn)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


# ----------------------------------------------------------------------
# free functions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with `a` of rank >= 2 and `b` a 2-D matrix.

    Leading axes of `a` act as batch dims; the last axis of `a` contracts
    with the first axis of `b`. Covers every linear layer in the engine.
    """
    a, b = Tensor._coerce(a), Tensor._coerce(b)
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects (..., n) x (n, m) with 2-D rhs: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def gfn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            a2 = a.data.reshape(-1, a.shape[-1])
            _accumulate(b, a2.T @ g2)

    return Tensor(out, _parents=(a, b), _grad_fn=gfn)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x). Derivative Phi(x) + x * phi(x)."""
    x = Tensor._coerce(x)
    cdf = _norm_cdf(x.data)

    def gfn(g):
        _accumulate(x, g * (cdf + x.data * _norm_pdf(x.data)))

    return Tensor(x.data * cdf, _parents=(x,), _grad_fn=gfn)


def sigmoid(x: Tensor) -> Tensor:
    x = Tensor._coerce(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def gfn(g):
        _accumulate(x, g * s * (1.0 - s))

    return Tensor(s, _parents=(x,), _grad_fn=gfn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; rows sum to 1."""
    x = Tensor._coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def gfn(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(x, p * (g - dot))

    return Tensor(p, _parents=(x,), _grad_fn=gfn)


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup). Backward scatter-adds."""
    table = Tensor._coerce(table)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = table.data[idx]

    def gfn(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        _accumulate(table, acc)

    return Tensor(out, _parents=(table,), _grad_fn=gfn)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; backward sums over the expanded axes."""
    x = Tensor._coerce(x)
    shape = tuple(shape)
    if not _broadcastable(x.shape, shape):
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    out = np.broadcast_to(x.data, shape).copy()

    def gfn(g):
        _accumulate(x, _unbroadcast(g, x.shape))

    return Tensor(out, _parents=(x,), _grad_fn=gfn)


def evaluate(graph_fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run a tensor-valued function eagerly; the result carries the tape."""
    out = graph_fn(*inputs)
    if not isinstance(out, Tensor):
        raise ContractError("graph_fn must return a Tensor")
    return out


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Reverse-mode sweep from a scalar loss.

    Fills `grad` on every requires_grad tensor reachable from `loss`,
    traversing nodes in exact reverse creation order. Tensors passed in
    `params` that the graph never touched get explicit zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)

    for node in nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)

    nodes.sort(key=lambda n: n._order, reverse=True)
    for node in nodes:
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)

    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)


def finite_difference_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate, one coordinate at a time.

    The verification oracle for backward(): (f(x + h e) - f(x - h e)) / 2h.
    Works on a copy of x; f must be scalar-valued.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] = base.reshape(-1)[i] + h
        f_plus = float(f(Tensor(bumped.reshape(base.shape))))
        bumped[i] = base.reshape(-1)[i] - h
        f_minus = float(f(Tensor(bumped.reshape(base.shape))))
        flat[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)
