"""Information-structured disentanglement of quantized latents.

Dependence between latent partitions is measured with a plug-in estimate of
discrete mutual information built from soft code assignments, so every term
is differentiable with respect to the continuous encoder outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ndgrad as nd
from .errors import DomainError, ModeError, ShapeError
from .ndgrad import Tensor, record

MI_EPS = 1e-8
MAX_LOCATIONS = 4096


@dataclass
class SoftAssignment:
    posteriors: Tensor  # [M, K]
    temperature: float

    @property
    def M(self) -> int:
        return self.posteriors.shape[0]

    @property
    def K(self) -> int:
        return self.posteriors.shape[1]


@dataclass
class InfoLossWeights:
    """Weights of the information loss and its variance floor.

    ``alpha`` unique separation, ``beta`` redundancy agreement, ``gamma``
    unique/redundant leakage, ``delta`` complementary/redundant,
    ``eps_w`` complementary/unique.
    """

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    eps_w: float = 1.0
    lambda_vf: float = 0.1
    sigma0: float = 0.1
    cross_factor_symmetric: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "eps_w", "lambda_vf", "sigma0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class PidLatents:
    """Continuous partitions ``[M, p]`` sampled at matching locations, with soft assignments."""

    r1: Tensor
    u1: Tensor
    r2: Tensor
    u2: Tensor
    c: Tensor
    assign: dict[str, SoftAssignment] = field(default_factory=dict)

    def partition(self, name: str) -> Tensor:
        return getattr(self, name)


def soft_assign(z: Tensor, codes, tau: float = 1.0) -> SoftAssignment:
    """Row-wise softmax of ``-||z_n - e_k||^2 / tau``."""
    if tau <= 0:
        raise DomainError("temperature must be positive")
    z, codes = nd.as_tensor(z), nd.as_tensor(codes)
    if z.ndim != 2 or codes.ndim != 2 or z.shape[1] != codes.shape[1]:
        raise ShapeError(f"soft_assign needs [M,d] and [K,d], got {z.shape} and {codes.shape}")
    M, K = z.shape[0], codes.shape[0]
    zz = nd.expand(nd.sum(nd.mul(z, z), axis=1, keepdims=True), (M, K))
    ee = nd.expand(nd.reshape(nd.sum(nd.mul(codes, codes), axis=1), (1, K)), (M, K))
    cross = nd.matmul(z, nd.transpose(codes))
    dist = nd.sub(nd.add(zz, ee), nd.mul(cross, 2.0))
    return SoftAssignment(nd.softmax(nd.mul(dist, -1.0 / tau), axis=1), tau)


def joint_estimate(a: SoftAssignment, b: SoftAssignment) -> Tensor:
    """Plug-in joint over code pairs: mean over locations of outer(pi_A, pi_B)."""
    if a.M != b.M:
        raise ShapeError(f"assignments cover {a.M} and {b.M} locations")
    return nd.mul(nd.matmul(nd.transpose(a.posteriors), b.posteriors), 1.0 / a.M)


def mutual_information(joint, eps: float = MI_EPS) -> Tensor:
    """Smoothed discrete mutual information of a joint table, in nats."""
    joint = nd.as_tensor(joint)
    ka, kb = joint.shape
    pa = nd.sum(joint, axis=1, keepdims=True)
    pb = nd.sum(joint, axis=0, keepdims=True)
    log_joint = nd.log(nd.add(joint, eps))
    log_pa = nd.expand(nd.log(nd.add(pa, eps)), (ka, kb))
    log_pb = nd.expand(nd.log(nd.add(pb, eps)), (ka, kb))
    ratio = nd.sub(nd.sub(log_joint, log_pa), log_pb)
    return nd.sum(nd.mul(joint, ratio))


def nmi(a: SoftAssignment, b: SoftAssignment, eps: float = MI_EPS) -> Tensor:
    """MI divided by its finite-alphabet bound log(min(K_A, K_B))."""
    bound = math.log(min(a.K, b.K)) + eps
    return nd.mul(mutual_information(joint_estimate(a, b), eps), 1.0 / bound)


def channel_std(z) -> Tensor:
    """Population std of each column of ``[M, C]``; zero-variance columns get zero gradient."""
    z = nd.as_tensor(z)
    M = z.shape[0]
    mu = z.data.mean(axis=0)
    xc = z.data - mu
    std = np.sqrt((xc * xc).mean(axis=0))

    def backward(g):
        safe = np.where(std > 0, std, 1.0)
        return (np.where(std > 0, g / (M * safe), 0.0) * xc,)

    return record(std, (z,), backward, "channel_std")


def variance_floor(z, sigma0: float = 0.1) -> Tensor:
    """Mean over channels of max(0, sigma0 - std(z_j))."""
    z = nd.as_tensor(z)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ShapeError("variance_floor needs [M, C] with M >= 2")
    gap = nd.sub(sigma0, channel_std(z))
    return nd.mean(nd.maximum(gap, 0.0))


def value_mismatch(r1, r2) -> Tensor:
    """Mean over locations of the squared L2 distance between partitions."""
    d = nd.sub(r1, r2)
    return nd.mul(nd.sum(nd.mul(d, d)), 1.0 / r1.shape[0])


def info_terms(latents: PidLatents, w: InfoLossWeights, eps: float = MI_EPS) -> dict[str, Tensor]:
    """The individual weighted terms whose sum is the information loss."""
    A = latents.assign
    u2_partner = "r2" if w.cross_factor_symmetric else "r1"
    terms = {
        "unique": nd.mul(nmi(A["u1"], A["u2"], eps), w.alpha),
        "redundant": nd.mul(nd.add(nd.sub(1.0, nmi(A["r1"], A["r2"], eps)),
                                   value_mismatch(latents.r1, latents.r2)), w.beta),
        "cross": nd.mul(nd.add(nmi(A["u1"], A["r1"], eps), nmi(A["u2"], A[u2_partner], eps)), w.gamma),
        "comp_red": nd.mul(nd.add(nmi(A["c"], A["r1"], eps), nmi(A["c"], A["r2"], eps)), w.delta),
        "comp_uni": nd.mul(nd.add(nmi(A["c"], A["u1"], eps), nmi(A["c"], A["u2"], eps)), w.eps_w),
    }
    vf = nd.add(nd.add(variance_floor(latents.u1, w.sigma0), variance_floor(latents.u2, w.sigma0)),
                variance_floor(latents.c, w.sigma0))
    terms["variance_floor"] = nd.mul(vf, w.lambda_vf)
    return terms


def info_loss(latents: PidLatents, w: InfoLossWeights, eps: float = MI_EPS) -> Tensor:
    total = None
    for t in info_terms(latents, w, eps).values():
        total = t if total is None else nd.add(total, t)
    return total


def sample_locations(m_total: int, rng: Optional[np.random.Generator], max_m: int = MAX_LOCATIONS) -> np.ndarray:
    """All locations when there are at most ``max_m``, else a uniform subsample."""
    if m_total <= max_m:
        return np.arange(m_total)
    if rng is None:
        raise ValueError("subsampling locations needs an rng")
    return np.sort(rng.choice(m_total, size=max_m, replace=False))


def should_swap(rng: np.random.Generator, p: float = 0.5) -> bool:
    """Per-mini-batch coin flip for exchanging the modality inputs of the RU encoder."""
    return bool(rng.random() < p)


def stabilize_redundant(r1: Tensor, r2: Tensor, mode: str, rng: np.random.Generator,
                        training: bool = True, alpha: Optional[float] = None, p_swap: float = 0.5):
    """Training-time symmetrization of the two redundant partitions.

    ``swap`` returns the pair exchanged with probability ``p_swap``;
    ``mix`` returns ``alpha*r1 + (1-alpha)*r2`` with ``alpha ~ U(0,1)``;
    ``choose`` picks uniformly among ``r1``, ``r2`` and the mix.
    """
    if not training:
        raise ModeError("redundant stabilizers are training-only; inference uses r1")
    if mode == "swap":
        return (r2, r1) if should_swap(rng, p_swap) else (r1, r2)
    if mode not in ("mix", "choose"):
        raise ValueError(f"unknown stabilizer mode {mode!r}")
    a = float(rng.uniform()) if alpha is None else float(alpha)
    r_mix = nd.add(nd.mul(r1, a), nd.mul(r2, 1.0 - a))
    if mode == "mix":
        return r_mix
    return (r1, r2, r_mix)[int(rng.integers(3))]
