"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps one ndarray plus the tape bookkeeping needed to pull
gradients back through whatever graph the forward pass built. Everything
is float64 by contract: it keeps finite-difference checks tight and the
models here are small enough that memory never matters.

Determinism contract: all ops are plain numpy calls with a fixed
reduction order, so repeated runs with identical inputs produce bitwise
identical results on one machine.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special as _special

from .errors import NumericalError

Array = np.ndarray

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """float64 array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad: bool = requires_grad and _GRAD_ENABLED
        # list of (parent, fn) where fn maps out-grad -> parent-grad contribution
        self._parents: list[tuple[Tensor, Callable[[Array], Array]]] = []

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            out_grad = node.grad
            if out_grad is None:
                continue
            for parent, grad_fn in node._parents:
                if not parent.requires_grad:
                    continue
                contrib = grad_fn(out_grad)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: Array, parents: Sequence[tuple[Tensor, Callable[[Array], Array]]]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p, _ in parents):
        out.requires_grad = True
        out._parents = [(p, fn) for p, fn in parents if p.requires_grad]
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def div(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data / b.data, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, [
        (a, lambda g: g * exponent * a.data ** (exponent - 1.0)),
    ])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), [(a, lambda g: g / a.data)])


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + _special.erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make(x * cdf, [(a, lambda g: g * (cdf + x * pdf))])


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(a.data.swapaxes(ax1, ax2), [(a, lambda g: g.swapaxes(ax1, ax2))])


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: Array) -> Array:
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _make(out, [(a, grad_fn)])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _wrap(1.0 / count))


# -- matmul -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = a.data @ b.data

    def grad_a(g: Array) -> Array:
        return _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)

    def grad_b(g: Array) -> Array:
        return _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)

    return _make(out, [(a, grad_a), (b, grad_b)])


# -- softmax family -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g: Array) -> Array:
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _make(s, [(a, grad_fn)])


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g: Array) -> Array:
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _make(out, [(a, grad_fn)])


# -- indexing -----------------------------------------------------------------


def gather_rows(a: Tensor, idx: Array) -> Tensor:
    """Select rows of `a` along axis 0; backward scatter-adds."""
    idx = np.asarray(idx)
    out = a.data[idx]

    def grad_fn(g: Array) -> Array:
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return acc

    return _make(out, [(a, grad_fn)])


def take_along_last(a: Tensor, idx: Array) -> Tensor:
    """Differentiable take_along_axis on the final axis."""
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx, axis=-1)

    def grad_fn(g: Array) -> Array:
        acc = np.zeros_like(a.data)
        grids = np.meshgrid(*[np.arange(n) for n in idx.shape], indexing="ij")
        index = tuple(grids[:-1]) + (idx,)
        np.add.at(acc, index, g)
        return acc

    return _make(out, [(a, grad_fn)])


def gather_pairs(a: Tensor, rows: Array, cols: Array) -> Tensor:
    """Pick a[rows[i], cols[i]] as a 1-D tensor."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = a.data[rows, cols]

    def grad_fn(g: Array) -> Array:
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, cols), g)
        return acc

    return _make(out, [(a, grad_fn)])


def index_add_rows(a: Tensor, idx: Array, b: Tensor) -> Tensor:
    """out = a with b's rows added at positions idx (duplicates accumulate)."""
    idx = np.asarray(idx)
    out = a.data.copy()
    np.add.at(out, idx, b.data)
    return _make(out, [
        (a, lambda g: g),
        (b, lambda g: g[idx]),
    ])


# -- construction helpers -----------------------------------------------------


def zeros(shape: tuple[int, ...], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def check_finite(t: Tensor, context: str) -> Tensor:
    """Raise NumericalError when the tensor holds NaN or Inf."""
    if not np.isfinite(t.data).all():
        raise NumericalError(f"non-finite values in {context}")
    return t
