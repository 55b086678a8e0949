"""3D Sobel edge magnitude, min-max normalization and the edge pyramid.

Kernel table
------------
The 13 orientations are the unique non-antipodal directions of the 3x3x3
neighbourhood: 3 axes, 6 face diagonals and 4 body diagonals. For a unit
direction ``v`` the kernel weight at offset ``p`` in {-1,0,1}^3 is::

    S_v(p) = (p . v) * 2 ** (-|p - (p . v) v|^2)

i.e. a central derivative along ``v`` times a separable-style smoothing
falloff across it. For axis directions this is exactly the classic
``[-1,0,1] x [1,2,1] x [1,2,1]`` Sobel kernel up to scale. Every kernel is
scaled so that a unit-slope ramp along ``v`` gives a response of 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ndgrad as nd
from .errors import ShapeError

EDGE_EPS = 1e-8


def sobel_directions() -> np.ndarray:
    """The 13 canonical direction vectors (first non-zero component positive)."""
    dirs = []
    for p in np.ndindex(3, 3, 3):
        v = np.array(p) - 1
        nz = v[v != 0]
        if nz.size and nz[0] > 0:
            dirs.append(v)
    return np.array(dirs, dtype=np.float64)


@lru_cache(maxsize=1)
def sobel_kernels() -> np.ndarray:
    """Kernel bank ``[13, 1, 3, 3, 3]``."""
    offsets = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), axis=-1)
    bank = []
    for v in sobel_directions():
        u = v / np.linalg.norm(v)
        along = offsets @ u
        perp = offsets - along[..., None] * u
        k = along * 2.0 ** (-(perp ** 2).sum(axis=-1))
        k /= (k * along).sum()
        bank.append(k)
    out = np.stack(bank)[:, None]
    out.setflags(write=False)
    return out


def _as_volume(volume) -> np.ndarray:
    v = volume.data if isinstance(volume, nd.Tensor) else np.asarray(volume, dtype=np.float64)
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4:
        raise ShapeError(f"expected [C,D,H,W], got {v.shape}")
    return v


def sobel_magnitude(volume, eps: float = EDGE_EPS) -> np.ndarray:
    """RMS energy ``sqrt(sum_f (S_f * I)^2 + eps)`` with replicate borders."""
    v = _as_volume(volume)
    if v.shape[0] != 1:
        raise ShapeError("sobel_magnitude expects a single-channel volume")
    padded = np.pad(v, ((0, 0),) + ((1, 1),) * 3, mode="edge")
    with nd.no_grad():
        resp = nd.conv3d(nd.Tensor(padded), nd.Tensor(sobel_kernels()), method="direct").data
    return np.sqrt((resp ** 2).sum(axis=0, keepdims=True) + eps)


def normalize_minmax(m, eps: float = EDGE_EPS) -> np.ndarray:
    """Global ``(M - min) / (max - min + eps)``."""
    m = np.asarray(m.data if isinstance(m, nd.Tensor) else m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    return (m - lo) / (hi - lo + eps)


@dataclass
class EdgePyramid:
    levels: list[np.ndarray]
    source_shape: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.levels[i]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [lvl.shape[1:] for lvl in self.levels]


def pyramid_shapes(shape, L: int) -> list[tuple[int, ...]]:
    shapes = [tuple(int(s) for s in shape)]
    for _ in range(1, L):
        shapes.append(tuple(-(-s // 2) for s in shapes[-1]))
    return shapes


def build_pyramid(m_hat, L: int) -> EdgePyramid:
    """Level 0 is the input; each further level halves extents (ceil) by trilinear resize."""
    v = _as_volume(m_hat)
    if L < 1:
        raise ShapeError("pyramid depth must be at least 1")
    if min(v.shape[1:]) < 2 ** (L - 1):
        raise ShapeError(f"input {v.shape[1:]} too small for {L} levels")
    levels = [v]
    with nd.no_grad():
        for shape in pyramid_shapes(v.shape[1:], L)[1:]:
            levels.append(nd.trilinear_resize(nd.Tensor(levels[-1]), shape).data)
    return EdgePyramid(levels, tuple(v.shape[1:]))


def edge_pyramid(x1, L: int, eps: float = EDGE_EPS) -> EdgePyramid:
    """Full pipeline from the first input modality to the normalized pyramid."""
    return build_pyramid(normalize_minmax(sobel_magnitude(x1, eps), eps), L)
