"""Volumetric ops on channel-major tensors ``[C, D, H, W]``."""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, record

# kernels at least this large go through the FFT path
FFT_MIN_KERNEL = 5


def _check_volume(x: Tensor, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be [C,D,H,W], got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------
def _direct_corr(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation of a padded input by im2col over two axes."""
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    out_sz = [(n - k) // stride + 1 for n in xp.shape[1:]]
    if k == 1:
        xs = xp[:, ::stride, ::stride, ::stride][:, :out_sz[0], :out_sz[1], :out_sz[2]]
        return np.tensordot(w[:, :, 0, 0, 0], xs, axes=(1, 0))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.zeros((co, *out_sz))
    span = stride * (out_sz[0] - 1) + 1
    for a in range(k):
        slab = win[:, a:a + span:stride]
        out += np.tensordot(w[:, :, a], slab, axes=([1, 2, 3], [0, 4, 5]))
    return out


def _direct_wgrad(xp: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    co, ci = g.shape[0], xp.shape[0]
    out_sz = g.shape[1:]
    if k == 1:
        xs = xp[:, ::stride, ::stride, ::stride][:, :out_sz[0], :out_sz[1], :out_sz[2]]
        return np.tensordot(g, xs, axes=([1, 2, 3], [1, 2, 3])).reshape(co, ci, 1, 1, 1)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    gw = np.empty((co, ci, k, k, k))
    span = stride * (out_sz[0] - 1) + 1
    for a in range(k):
        slab = win[:, a:a + span:stride]
        gw[:, :, a] = np.tensordot(g, slab, axes=([1, 2, 3], [1, 2, 3]))
    return gw


def _fft_shape(shape) -> tuple[int, ...]:
    return tuple(sfft.next_fast_len(int(n), real=True) for n in shape)


def _fft_corr(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[2]
    full = xp.shape[1:]
    fs = _fft_shape(full)
    X = sfft.rfftn(xp, s=fs, axes=(1, 2, 3))
    W = sfft.rfftn(w, s=fs, axes=(2, 3, 4))
    Y = np.einsum("cxyz,ocxyz->oxyz", X, W.conj(), optimize=True)
    y = sfft.irfftn(Y, s=fs, axes=(1, 2, 3))
    valid = [n - k + 1 for n in full]
    return np.ascontiguousarray(y[:, :valid[0]:stride, :valid[1]:stride, :valid[2]:stride])


def _dilate(g: np.ndarray, valid: Sequence[int], stride: int) -> np.ndarray:
    if stride == 1:
        return g
    gd = np.zeros((g.shape[0], *valid))
    gd[:, ::stride, ::stride, ::stride] = g
    return gd


def _fft_grads(xp: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int, need_x: bool, need_w: bool):
    k = w.shape[2]
    full = xp.shape[1:]
    fs = _fft_shape(full)
    valid = [n - k + 1 for n in full]
    gd = _dilate(g, valid, stride)
    G = sfft.rfftn(gd, s=fs, axes=(1, 2, 3))
    gx = gw = None
    if need_x:
        W = sfft.rfftn(w, s=fs, axes=(2, 3, 4))
        GX = np.einsum("oxyz,ocxyz->cxyz", G, W, optimize=True)
        gx = sfft.irfftn(GX, s=fs, axes=(1, 2, 3))[:, :full[0], :full[1], :full[2]]
    if need_w:
        X = sfft.rfftn(xp, s=fs, axes=(1, 2, 3))
        GW = np.einsum("cxyz,oxyz->ocxyz", X, G.conj(), optimize=True)
        gw = sfft.irfftn(GW, s=fs, axes=(2, 3, 4))[:, :, :k, :k, :k]
    return gx, gw


def _direct_xgrad(g: np.ndarray, w: np.ndarray, full: Sequence[int], stride: int) -> np.ndarray:
    # transposed correlation: dilate, pad by k-1 (plus the stride remainder), flip
    k = w.shape[2]
    valid = [n - k + 1 for n in full]
    gd = _dilate(g, valid, stride)
    gp = np.pad(gd, ((0, 0),) + ((k - 1, k - 1),) * 3)
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return _direct_corr(gp, wf, 1)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, method: str = "auto") -> Tensor:
    """3D cross-correlation of ``x [Ci,D,H,W]`` with ``kernel [Co,Ci,k,k,k]``.

    Zero padding; output extent per axis is ``(n + 2*padding - k)//stride + 1``.
    ``method`` selects the direct (im2col) or FFT path; ``auto`` uses FFT for
    kernels of size >= 5.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_volume(x)
    if kernel.ndim != 5 or kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel {kernel.shape} does not match input {x.shape}")
    k = kernel.shape[2]
    if kernel.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeError("kernel must be cubic with odd extent")
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    if any(n + 2 * padding < k for n in x.shape[1:]):
        raise ShapeError(f"kernel {k} larger than padded input {x.shape[1:]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise ShapeError("bias must have one entry per output channel")
    use_fft = method == "fft" or (method == "auto" and k >= FFT_MIN_KERNEL)
    p = padding
    xp = np.pad(x.data, ((0, 0),) + ((p, p),) * 3) if p else x.data
    out = _fft_corr(xp, kernel.data, stride) if use_fft else _direct_corr(xp, kernel.data, stride)
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        need_x, need_w = x.requires_grad, kernel.requires_grad
        if use_fft:
            gxp, gw = _fft_grads(xp, kernel.data, g, stride, need_x, need_w)
        else:
            gxp = _direct_xgrad(g, kernel.data, xp.shape[1:], stride) if need_x else None
            gw = _direct_wgrad(xp, g, k, stride) if need_w else None
        gx = None
        if gxp is not None:
            gx = gxp[:, p:p + x.shape[1], p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
            gx = np.ascontiguousarray(gx)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(1, 2, 3)),)
        return grads

    return record(out, parents, backward, "conv3d")


def embed_kernel(kernel: Tensor, size: int) -> Tensor:
    """Zero-pad a cubic kernel symmetrically to ``size``; gradient is cropped back."""
    kernel = as_tensor(kernel)
    k = kernel.shape[2]
    m = (size - k) // 2
    if m < 0 or (size - k) % 2:
        raise ShapeError(f"cannot embed kernel {k} into {size}")
    if m == 0:
        return kernel
    out = np.pad(kernel.data, ((0, 0), (0, 0)) + ((m, m),) * 3)
    return record(out, (kernel,), lambda g: (np.ascontiguousarray(g[:, :, m:m + k, m:m + k, m:m + k]),),
                  "embed_kernel")


def replicate_pad(x: Tensor, pad: int) -> Tensor:
    x = as_tensor(x)
    _check_volume(x)
    out = np.pad(x.data, ((0, 0),) + ((pad, pad),) * 3, mode="edge")

    def backward(g):
        gx = g
        for ax in (1, 2, 3):
            n = x.shape[ax]
            gx = np.moveaxis(gx, ax, 0)
            core = gx[pad:pad + n].copy()
            core[0] += gx[:pad].sum(axis=0)
            core[-1] += gx[pad + n:].sum(axis=0)
            gx = np.moveaxis(core, 0, ax)
        return (np.ascontiguousarray(gx),)

    return record(out, (x,), backward, "replicate_pad")


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------
@lru_cache(maxsize=256)
def linear_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` linear interpolation weights, align-corners-false.

    Source coordinates are clamped to the valid range, as in the usual
    half-pixel convention.
    """
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for j in range(n_out):
        src = min(max((j + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[j, lo] += 1.0 - t
        m[j, hi] += t
    m.setflags(write=False)
    return m


def _apply_axis(a: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, a, axes=(1, axis)), 0, axis)


def trilinear_resize(x: Tensor, target_shape: Sequence[int]) -> Tensor:
    """Resize the spatial axes of ``[C,D,H,W]`` to ``target_shape``."""
    x = as_tensor(x)
    _check_volume(x)
    target = tuple(int(t) for t in target_shape)
    if len(target) != 3 or min(target) < 1:
        raise ShapeError(f"target shape must be three extents >= 1, got {target_shape}")
    mats = [linear_resize_matrix(n, t) for n, t in zip(x.shape[1:], target)]
    out = x.data
    for ax, mat in zip((1, 2, 3), mats):
        if mat.shape[0] != mat.shape[1]:
            out = _apply_axis(out, mat, ax)

    def backward(g):
        gx = g
        for ax, mat in zip((1, 2, 3), mats):
            if mat.shape[0] != mat.shape[1]:
                gx = _apply_axis(gx, mat.T, ax)
        return (np.ascontiguousarray(gx),)

    return record(np.ascontiguousarray(out), (x,), backward, "trilinear_resize")


def upsample2(x: Tensor, target_shape: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    target = target_shape or tuple(2 * n for n in x.shape[1:])
    return trilinear_resize(x, target)


# --------------------------------------------------------------------------
# normalization and activation
# --------------------------------------------------------------------------
def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel spatial standardization without affine parameters."""
    x = as_tensor(x)
    _check_volume(x)
    n = int(np.prod(x.shape[1:]))
    if n < 2:
        raise ShapeError("instance_norm needs at least two voxels per channel")
    axes = (1, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return record(xhat, (x,), backward, "instance_norm")


def mish(x: Tensor) -> Tensor:
    """``x * tanh(softplus(x))``."""
    x = as_tensor(x)
    sp = np.logaddexp(0.0, x.data)
    tsp = np.tanh(sp)
    out = x.data * tsp

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return (g * (tsp + x.data * (1.0 - tsp * tsp) * sig),)

    return record(out, (x,), backward, "mish")


def channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias ``[C]`` to ``[C,D,H,W]``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.shape != (x.shape[0],):
        raise ShapeError("bias must have one entry per channel")
    out = x.data + bias.data[:, None, None, None]
    return record(out, (x, bias), lambda g: (g, g.sum(axis=(1, 2, 3))), "channel_bias")
