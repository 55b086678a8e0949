"""Vector-quantized bottleneck: codebooks, nearest-code lookup, EMA learning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ndgrad as nd
from .errors import InitError, NumericsError, ShapeError
from .ndgrad import Tensor, record

EMA_EPS = 1e-5


@dataclass
class Codebook:
    """``K`` code vectors of dimension ``d`` plus their EMA statistics.

    With ``learnable=True`` the embeddings are a gradient parameter (the
    ablation path); otherwise they are refreshed by :func:`ema_update`.
    """

    embeddings: np.ndarray
    decay: float = 0.99
    learnable: bool = False
    ema_counts: np.ndarray = field(default=None)
    ema_sums: np.ndarray = field(default=None)
    usage: np.ndarray = field(default=None)
    weight: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        self.embeddings = np.array(self.embeddings, dtype=np.float64)
        K = self.embeddings.shape[0]
        if self.embeddings.ndim != 2 or K < 2:
            raise ShapeError("codebook needs shape [K, d] with K >= 2")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        if self.ema_counts is None:
            self.ema_counts = np.ones(K)
        if self.ema_sums is None:
            self.ema_sums = self.embeddings * _smoothed(self.ema_counts)[:, None]
        if self.usage is None:
            self.usage = np.zeros(K)
        self.weight = Tensor(self.embeddings, requires_grad=self.learnable)

    @classmethod
    def random(cls, K: int, d: int, rng: np.random.Generator, scale: float = 1.0, **kw) -> "Codebook":
        return cls(rng.normal(scale=scale, size=(K, d)), **kw)

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def set_embeddings(self, emb: np.ndarray) -> None:
        self.embeddings = np.array(emb, dtype=np.float64)
        self.weight = Tensor(self.embeddings, requires_grad=self.learnable)

    def sync_from_weight(self) -> None:
        """Pull gradient-updated values back after an optimizer step."""
        self.embeddings = self.weight.data.copy()

    def reset_usage(self) -> None:
        self.usage = np.zeros(self.K)


@dataclass
class QuantizeResult:
    quantized: Tensor
    indices: np.ndarray
    codebook_loss: Tensor
    commitment_loss: Tensor


def _rows(cb: Codebook, rows: Optional[slice]) -> tuple[np.ndarray, int]:
    if rows is None:
        return cb.embeddings, 0
    start = rows.start or 0
    return cb.embeddings[rows], start


def nearest_codes(h: np.ndarray, codes: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the nearest code row for each row of ``h``; ties go to the lowest index."""
    out = np.empty(h.shape[0], dtype=np.int64)
    for lo in range(0, h.shape[0], chunk):
        diff = h[lo:lo + chunk, None, :] - codes[None, :, :]
        out[lo:lo + chunk] = np.argmin((diff * diff).sum(axis=-1), axis=1)
    return out


def quantize(h: Tensor, cb: Codebook, beta: float = 0.25, rows: Optional[slice] = None,
             track_usage: bool = True) -> QuantizeResult:
    """Replace each latent vector (last axis) by its nearest code.

    The returned tensor behaves as ``h + sg(e - h)``: forward values are
    exact code rows while the gradient with respect to ``h`` is the identity. ``rows``
    restricts the search to a contiguous slice of the codebook; indices are
    reported in full-codebook numbering.
    """
    h = nd.as_tensor(h)
    if h.shape[-1] != cb.d:
        raise ShapeError(f"latent dim {h.shape[-1]} does not match codebook dim {cb.d}")
    if not np.isfinite(h.data).all():
        raise NumericsError("non-finite latent passed to quantize")
    codes, offset = _rows(cb, rows)
    flat = h.data.reshape(-1, cb.d)
    local = nearest_codes(flat, codes)
    indices = local + offset
    e = cb.embeddings[indices].reshape(h.shape)
    quantized = record(np.ascontiguousarray(e), (h,), lambda g: (g,), "straight_through")
    quantized.tags.add("bottleneck")
    if track_usage:
        cb.usage += np.bincount(indices, minlength=cb.K)
    result = QuantizeResult(quantized, indices.reshape(h.shape[:-1]), None, None)
    result.codebook_loss, result.commitment_loss = vq_losses(h, result, beta, cb)
    return result


def vq_losses(h: Tensor, result: QuantizeResult, beta: float, cb: Optional[Codebook] = None):
    """Codebook and commitment terms, each a mean over latent locations.

    codebook = mean ||sg[h] - e||^2 (differentiable w.r.t. the codebook only
    when it is learnable); commitment = beta * mean ||h - sg[e]||^2.
    """
    h = nd.as_tensor(h)
    d = h.shape[-1]
    n = h.size // d
    idx = result.indices.reshape(-1)
    flat = nd.reshape(h, (n, d))
    if cb is not None and cb.learnable:
        e_live = nd.take(cb.weight, idx, axis=0)
    else:
        e_live = Tensor(result.quantized.data.reshape(n, d))
    diff_cb = nd.sub(Tensor(flat.data), e_live)
    codebook_loss = nd.sum(nd.mul(diff_cb, diff_cb)) / n
    diff_cm = nd.sub(flat, Tensor(e_live.data))
    commitment_loss = nd.sum(nd.mul(diff_cm, diff_cm)) * (beta / n)
    return codebook_loss, commitment_loss


def _smoothed(counts: np.ndarray, eps: float = EMA_EPS) -> np.ndarray:
    n = counts.sum()
    if n <= 0:
        return np.full_like(counts, eps)
    return (counts + eps) / (n + counts.size * eps) * n


def ema_update(cb: Codebook, h, indices, eps: float = EMA_EPS) -> Codebook:
    """One exponential-moving-average step of codebook statistics.

    counts <- decay*counts + (1-decay)*n_k and sums <- decay*sums +
    (1-decay)*sum of assigned latents; embeddings become sums divided by
    Laplace-smoothed counts. Mutates and returns ``cb``.
    """
    hv = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    hv = hv.reshape(-1, cb.d)
    idx = np.asarray(indices).reshape(-1)
    if idx.size != hv.shape[0]:
        raise ShapeError("one index per latent vector is required")
    n_k = np.bincount(idx, minlength=cb.K).astype(np.float64)
    s_k = np.zeros_like(cb.ema_sums)
    np.add.at(s_k, idx, hv)
    g = cb.decay
    cb.ema_counts = g * cb.ema_counts + (1.0 - g) * n_k
    cb.ema_sums = g * cb.ema_sums + (1.0 - g) * s_k
    cb.set_embeddings(cb.ema_sums / _smoothed(cb.ema_counts, eps)[:, None])
    return cb


def restart_dead_codes(cb: Codebook, samples, rng: np.random.Generator, rows: Optional[slice] = None) -> int:
    """Reseed codes with zero recorded usage from randomly drawn latents.

    Only rows inside ``rows`` are considered. Reseeded codes get unit EMA
    count so the next update treats them like fresh centroids. Returns the
    number of codes replaced.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1, cb.d)
    lo, hi, _ = (rows or slice(0, cb.K)).indices(cb.K)
    dead = lo + np.flatnonzero(cb.usage[lo:hi] == 0)
    if dead.size == 0 or x.shape[0] == 0:
        return 0
    pick = rng.choice(x.shape[0], size=dead.size, replace=dead.size > x.shape[0])
    emb = cb.embeddings.copy()
    emb[dead] = x[pick]
    cb.ema_counts[dead] = 1.0
    cb.ema_sums[dead] = emb[dead] * _smoothed(cb.ema_counts)[dead, None]
    cb.set_embeddings(emb)
    return int(dead.size)


def _kmeanspp(samples: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = samples.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((samples - samples[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((samples - samples[nxt]) ** 2).sum(axis=1))
    return samples[chosen].copy()


def kmeans(samples: np.ndarray, K: int, iters: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm from k-means++ seeds.

    Empty clusters are re-seeded from the sample farthest from its current
    centroid. Deterministic for a given ``seed``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < K:
        raise InitError(f"need at least K={K} samples, got {n}")
    rng = np.random.default_rng(seed)
    cent = _kmeanspp(samples, K, rng)
    for _ in range(iters):
        assign = nearest_codes(samples, cent)
        new = np.zeros_like(cent)
        np.add.at(new, assign, samples)
        counts = np.bincount(assign, minlength=K)
        dist = ((samples - cent[assign]) ** 2).sum(axis=1)
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist))
            new[k] = samples[far]
            counts[k] = 1
            dist[far] = -1.0
        new /= counts[:, None]
        if np.array_equal(new, cent):
            break
        cent = new
    return cent


def kmeans_init(cb: Codebook, samples, iters: int = 20, seed: int = 0,
                rows: Optional[slice] = None) -> Codebook:
    """Set (a slice of) the codebook to k-means centroids and reset EMA stats."""
    sv = samples.data if isinstance(samples, Tensor) else np.asarray(samples, dtype=np.float64)
    sv = sv.reshape(-1, cb.d)
    rows = rows or slice(0, cb.K)
    K = rows.stop - (rows.start or 0)
    emb = cb.embeddings.copy()
    emb[rows] = kmeans(sv, K, iters, seed)
    cb.ema_counts = np.ones(cb.K)
    cb.ema_sums = emb * _smoothed(cb.ema_counts)[:, None]
    cb.set_embeddings(emb)
    return cb


def codebook_perplexity(usage) -> float:
    """exp(entropy) of the empirical code-usage distribution, in [1, K]."""
    u = np.asarray(usage, dtype=np.float64)
    total = u.sum()
    if total <= 0:
        raise ValueError("no assignments recorded")
    p = u[u > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


class Reservoir:
    """Fixed-size uniform sample of vectors from a stream (Algorithm R)."""

    def __init__(self, capacity: int, dim: int, seed: int = 0):
        self.capacity = capacity
        self.buffer = np.empty((capacity, dim))
        self.seen = 0
        self.rng = np.random.default_rng(seed)

    def add(self, vectors: np.ndarray) -> None:
        for v in np.asarray(vectors, dtype=np.float64).reshape(-1, self.buffer.shape[1]):
            if self.seen < self.capacity:
                self.buffer[self.seen] = v
            else:
                j = int(self.rng.integers(self.seen + 1))
                if j < self.capacity:
                    self.buffer[j] = v
            self.seen += 1

    @property
    def samples(self) -> np.ndarray:
        return self.buffer[:min(self.seen, self.capacity)].copy()
