"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every tensor produced by a differentiable op remembers its parents and a
backward rule. Node ids come from a global counter, so sorting reachable
nodes by id reproduces the recording order; ``backward`` walks that order in
reverse and visits each node exactly once.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericsError

_ids = itertools.count()
_grad_enabled = True
_scope_stack: list[str] = []


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def scope(name: str):
    """Label every tensor created inside the block with ``name``.

    Labels nest as ``outer/inner``; they are used by graph audits such as the
    decoder bottleneck check.
    """
    _scope_stack.append(name)
    try:
        yield
    finally:
        _scope_stack.pop()


def current_scope() -> str:
    return "/".join(_scope_stack)


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-d array of float64 values, optionally tracked for gradients.

    ``data`` is a C-contiguous numpy array; ``grad`` (when present) has the
    same shape. Tensors are treated as immutable once created.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn",
                 "op", "id", "scope", "tags", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        if check and not np.isfinite(arr).all():
            raise NumericsError("tensor contains non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Optional[Callable] = None
        self.op = "leaf"
        self.id = next(_ids)
        self.scope = current_scope()
        self.tags: set[str] = set()

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no history."""
        return Tensor(self.data, check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable node.

        Without ``grad`` the tensor must hold a single value and is seeded
        with 1. Gradients add into existing ``.grad`` buffers, so repeated
        calls accumulate (used for gradient accumulation across subjects).
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a single-element tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64).reshape(self.shape)
        nodes = _reachable(self)
        local: dict[int, np.ndarray] = {self.id: grad}
        for node in nodes:  # descending id = reverse recording order
            g = local.pop(node.id, None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node.backward_fn is None:
                continue
            pgrads = node.backward_fn(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = local.get(parent.id)
                local[parent.id] = pg if prev is None else prev + pg

    # -- operator sugar (implemented in ops) -------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.pow(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    return sorted(seen.values(), key=lambda t: t.id, reverse=True)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, attaching history when any parent needs gradients.

    ``backward_fn`` maps the output gradient to a tuple of parent gradients
    (``None`` for parents that receive nothing).
    """
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.parents = tuple(parents) if _grad_enabled else ()
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data) -> Tensor:
    """A leaf tensor that requires gradients."""
    return Tensor(data, requires_grad=True)
