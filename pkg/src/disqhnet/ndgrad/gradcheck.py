"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                   coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t``.

    ``t.data`` is perturbed in place and restored. With ``coords`` only those
    flat positions are evaluated (others are left as 0).
    """
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(t.shape)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              rtol: float = 1e-4, atol: float = 1e-8, max_coords: int | None = None,
              rng: np.random.Generator | None = None) -> bool:
    """Compare backward gradients with central differences; raise on mismatch.

    Every element must satisfy ``|a - n| <= atol + rtol * max(|a|, |n|)``.
    ``max_coords`` samples that many entries per input (all when ``None``).
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        numeric = numerical_grad(fn, t, h=h, coords=coords)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        sel = np.arange(a.size) if coords is None else np.asarray(coords)
        a, n = a[sel], n[sel]
        bad = np.abs(a - n) > atol + rtol * np.maximum(np.abs(a), np.abs(n))
        if bad.any():
            i = int(np.argmax(bad))
            raise AssertionError(
                f"gradient mismatch for tensor {t.shape}: analytic {a[i]!r} vs numeric {n[i]!r} "
                f"({int(bad.sum())}/{a.size} entries off)")
    return True
