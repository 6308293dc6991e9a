"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation in this package bottoms out in the primitives
defined here. Forward ops push a record onto the active tape; ``backward``
replays the tape in reverse execution order (always a valid topological
order) and accumulates adjoints into ``Tensor.grad``.

Precision is carried by the underlying numpy dtype: float32 by default,
float64 for verification runs. Gradients always match the dtype of the
tensor they belong to.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class Tape:
    """Ordered record of executed operations.

    Each record pairs an op's output with a closure that routes the output's
    adjoint to the op's inputs. Records outside the loss's subgraph are
    skipped during replay because their outputs never receive a gradient.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: "Tensor", backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def backward(self, loss: "Tensor") -> None:
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)

    def clear(self) -> None:
        self._records.clear()


_TAPES: list[Tape] = [Tape()]
_GRAD_ENABLED: list[bool] = [True]


def active_tape() -> Tape:
    return _TAPES[-1]


def clear_tape() -> None:
    _TAPES[-1].clear()


@contextmanager
def tape_scope():
    """Run a region on a fresh tape; records are discarded on exit."""
    _TAPES.append(Tape())
    try:
        yield _TAPES[-1]
    finally:
        _TAPES.pop()


@contextmanager
def no_grad():
    """Disable recording (parameter updates, evaluation passes)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """A dense row-major array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        return t

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        head = np.array2string(self.data, precision=4, threshold=8)
        return f"Tensor({head}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Seed this tensor's adjoint with ones and replay the active tape."""
        active_tape().backward(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    # -- operator sugar ----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(x, dtype=dtype), False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        # copy: g may alias another tensor's grad buffer
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def apply_op(data: np.ndarray, inputs: Sequence[Tensor],
             backward: Callable[[np.ndarray], None]) -> Tensor:
    """Build an op result and record its adjoint closure on the active tape.

    ``backward`` receives the output gradient and must call ``accumulate``
    for each differentiable input. This is the extension point for fused
    ops (convolution, scans) that keep a hand-written backward pass.
    """
    req = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    if req:
        _TAPES[-1].record(out, backward)
    return out


# public alias used by fused ops in other modules
accumulate = _accum


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return apply_op(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data - b.data

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return apply_op(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data
    out_data = ad * bd

    def bw(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return apply_op(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data
    out_data = ad / bd

    def bw(g):
        _accum(a, g / bd)
        _accum(b, -g * ad / (bd * bd))

    return apply_op(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return apply_op(-a.data, (a,), bw)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar without upcasting the dtype."""
    s = a.data.dtype.type(s)

    def bw(g):
        _accum(a, g * s)

    return apply_op(a.data * s, (a,), bw)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out_data = a.data ** p
    ad = a.data

    def bw(g):
        _accum(a, g * p * ad ** (p - 1))

    return apply_op(out_data, (a,), bw)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi

    def bw(g):
        _accum(a, g * mask)

    return apply_op(out_data, (a,), bw)


# -- activations -------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return apply_op(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        _accum(a, g / ad)

    return apply_op(np.log(ad), (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)

    def bw(g):
        _accum(a, g * s * (1.0 - s))

    return apply_op(s, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), stable form; derivative is sigmoid(x)
    out_data = np.logaddexp(a.data.dtype.type(0), a.data)
    ad = a.data

    def bw(g):
        _accum(a, g * expit(ad))

    return apply_op(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return apply_op(np.maximum(a.data, 0), (a,), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data
    out_data = ad @ bd

    def bw(g):
        _accum(a, g @ bd.T)
        _accum(b, ad.T @ g)

    return apply_op(out_data, (a, b), bw)


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape

    def bw(g):
        _accum(a, g.reshape(old))

    return apply_op(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inv))

    return apply_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return apply_op(out_data, tuple(tensors), bw)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along axis 0; the adjoint scatter-adds back."""
    index = np.asarray(index, dtype=np.intp)
    out_data = a.data[index]

    def bw(g):
        if a.requires_grad:
            dx = np.zeros_like(a.data)
            np.add.at(dx, index, g)
            _accum(a, dx)

    return apply_op(out_data, (a,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor._wrap(a.data, False)


# -- reductions ----------------------------------------------------------------

def _reduced_shape(shape: tuple[int, ...], axis) -> tuple[int, ...]:
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    bshape = _reduced_shape(a.data.shape, axis)
    full = a.data.shape

    def bw(g):
        _accum(a, np.broadcast_to(g.reshape(bshape), full))

    return apply_op(out_data, (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    bshape = _reduced_shape(a.data.shape, axis)
    full = a.data.shape
    count = a.data.dtype.type(a.data.size / max(out_data.size, 1))

    def bw(g):
        _accum(a, np.broadcast_to(g.reshape(bshape) / count, full))

    return apply_op(out_data, (a,), bw)


def parameters_of(named: dict[str, Tensor]) -> list[Tensor]:
    return list(named.values())


def seed_all(params: Iterable[Tensor], value: float = 0.0) -> None:
    for p in params:
        p.data.fill(value)
