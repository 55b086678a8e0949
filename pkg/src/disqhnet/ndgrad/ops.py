"""Elementwise, reduction and shape ops with their backward rules.

Binary ops accept two broadcasting modes only: equal shapes, or one operand
holding a single value (a Python number or a size-1 tensor). Anything else
is a ``ShapeError``; use :func:`expand` to broadcast explicitly.
"""
from __future__ import annotations

from typing import Sequence

import builtins

import numpy as np

from ..errors import DomainError, ShapeError
from .tensor import Tensor, as_tensor, record

__all__ = [
    "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sqrt", "abs",
    "tanh", "softplus", "maximum", "minimum", "clamp_min", "sum", "mean",
    "max", "min", "reshape", "transpose", "concat", "slice", "take", "expand",
    "matmul", "where", "softmax", "log_softmax", "stack",
]


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def _out_shape(a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    return a.shape if b.size == 1 else b.shape


def _scalar_view(t: Tensor, shape) -> np.ndarray:
    # size-1 operands are reshaped to a 0-d value so numpy broadcasts them
    return t.data.reshape(()) if t.size == 1 and t.shape != shape else t.data


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    shape = _out_shape(a, b)
    out = _scalar_view(a, shape) + _scalar_view(b, shape)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    shape = _out_shape(a, b)
    out = _scalar_view(a, shape) - _scalar_view(b, shape)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    shape = _out_shape(a, b)
    av, bv = _scalar_view(a, shape), _scalar_view(b, shape)
    return record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, a), _unbroadcast(g * av, b)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    shape = _out_shape(a, b)
    av, bv = _scalar_view(a, shape), _scalar_view(b, shape)
    if np.any(bv == 0):
        raise DomainError("division by zero")
    out = av / bv
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / bv, a), _unbroadcast(-g * out / bv, b)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(exponent)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError("fractional power of a negative value")
    out = a.data ** p
    return record(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log of a negative value")
    out = np.log(a.data)
    return record(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a) -> Tensor:
    a = as_tensor(a)
    return record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record(out, (a,), lambda g: (g * sig,), "softplus")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first operand."""
    a, b = _pair(a, b)
    shape = _out_shape(a, b)
    av, bv = _scalar_view(a, shape), _scalar_view(b, shape)
    pick = av >= bv
    out = np.where(pick, av, bv)
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g * pick, a), _unbroadcast(g * ~pick, b)), "maximum")


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    shape = _out_shape(a, b)
    av, bv = _scalar_view(a, shape), _scalar_view(b, shape)
    pick = av <= bv
    out = np.where(pick, av, bv)
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g * pick, a), _unbroadcast(g * ~pick, b)), "minimum")


def clamp_min(a, lo: float) -> Tensor:
    return maximum(a, lo)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _restore(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return record(out, (a,), lambda g: (_restore(g, a.shape, axes, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return record(out, (a,), lambda g: (_restore(g, a.shape, axes, keepdims) / n,), "mean")


def _extreme(a, axis, keepdims, fn, name):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = fn(a.data, axis=axes, keepdims=keepdims)

    def backward(g):
        full = _restore(out, a.shape, axes, keepdims)
        mask = a.data == full
        count = mask.sum(axis=axes, keepdims=True)
        return (_restore(g, a.shape, axes, keepdims) * mask / count,)

    return record(out, (a,), backward, name)


def max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Reduction max; tied maxima share the gradient equally."""
    return _extreme(a, axis, keepdims, np.max, "max")


def min(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.min, "min")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat shapes {ref} and {t.shape} differ off axis {ax}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record(out, ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shape = ts[0].shape
    expanded = [reshape(t, shape[:axis] + (1,) + shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def slice(a, index) -> Tensor:
    """Basic indexing (ints, slices, Ellipsis). Advanced indexing goes through :func:`take`."""
    a = as_tensor(a)
    idx = index if isinstance(index, tuple) else (index,)
    for item in idx:
        if not (item is None or item is Ellipsis or isinstance(item, (int, np.integer, builtins.slice))):
            raise ShapeError("only basic indexing is supported; use take()")
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return record(out, (a,), backward, "slice")


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    out = np.take(a.data, idx, axis=ax)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return record(out, (a,), backward, "take")


def expand(a, shape) -> Tensor:
    """Explicit broadcast of size-1 axes (same rank) to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    out = np.broadcast_to(a.data, shape)
    return record(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k]@[k,n], got {a.shape} and {b.shape}")
    out = a.data @ b.data
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` (a constant boolean array) holds, else ``b``."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    shape = _out_shape(a, b)
    out = np.where(cond, _scalar_view(a, shape), _scalar_view(b, shape))
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g * cond, a), _unbroadcast(g * ~cond, b)), "where")


def log_softmax(a, axis: int = -1) -> Tensor:
    """Composite log-softmax; the max shift is a constant so it carries no gradient."""
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    z = sub(a, expand(Tensor(shift), a.shape))
    lse = log(sum(exp(z), axis=axis, keepdims=True))
    return sub(z, expand(lse, a.shape))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))
