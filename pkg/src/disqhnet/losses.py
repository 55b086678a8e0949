"""Reconstruction losses and the weighted training objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .errors import ConfigError, ShapeError
from .ndgrad import Tensor

RECON_KINDS = ("mse", "vcc", "mse+ag", "vcc+ag")


@dataclass
class LossConfig:
    recon_kind: str = "mse"
    vcc_alpha: float = 1.0
    vcc_gamma: float = 1.0
    charbonnier_eps: float = 1e-3
    ag_weight: float = 1.0
    lambda_vq: float = 1.0
    lambda_info: float = 0.1
    lambda_skip: float = 0.1

    def __post_init__(self):
        if self.recon_kind not in RECON_KINDS:
            raise ConfigError(f"recon_kind must be one of {RECON_KINDS}")
        if self.charbonnier_eps <= 0:
            raise ConfigError("charbonnier_eps must be positive")
        for name in ("vcc_alpha", "ag_weight", "lambda_vq", "lambda_info", "lambda_skip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def _pair(y_hat, y) -> tuple[Tensor, Tensor]:
    y_hat, y = nd.as_tensor(y_hat), nd.as_tensor(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction {y_hat.shape} and target {y.shape} differ")
    return y_hat, y


def mse(y_hat, y) -> Tensor:
    y_hat, y = _pair(y_hat, y)
    d = nd.sub(y_hat, y)
    return nd.mean(nd.mul(d, d))


def spatial_gradient(x) -> list[Tensor]:
    """Central differences along the three spatial axes with replicate borders."""
    x = nd.as_tensor(x)
    if x.ndim == 3:
        x = nd.reshape(x, (1,) + x.shape)
    xp = nd.replicate_pad(x, 1)
    D, H, W = x.shape[1:]
    c = slice(1, -1)
    out = []
    for ax in range(3):
        hi = [c, c, c]
        lo = [c, c, c]
        n = (D, H, W)[ax]
        hi[ax] = slice(2, n + 2)
        lo[ax] = slice(0, n)
        diff = nd.sub(nd.slice(xp, (slice(None), *hi)), nd.slice(xp, (slice(None), *lo)))
        out.append(nd.mul(diff, 0.5))
    return out


def gradient_magnitude(y) -> np.ndarray:
    g = spatial_gradient(nd.as_tensor(y).detach())
    return np.sqrt(sum(t.data ** 2 for t in g))


def vcc(y_hat, y, alpha: float = 1.0, gamma: float = 1.0, eps: float = 1e-3) -> Tensor:
    """Contrast-weighted Charbonnier: mean of ``(1 + alpha*|grad y|^gamma) * sqrt(r^2 + eps^2)``.

    The weights depend on the target only and carry no gradient.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    y_hat, y = _pair(y_hat, y)
    w = 1.0 + alpha * gradient_magnitude(y).reshape(y.shape) ** gamma
    r = nd.sub(y_hat, y)
    rho = nd.sqrt(nd.add(nd.mul(r, r), eps * eps))
    return nd.mean(nd.mul(rho, Tensor(w)))


def ag(y_hat, y) -> Tensor:
    """Mean absolute difference between the gradient fields of prediction and target."""
    y_hat, y = _pair(y_hat, y)
    gp, gt = spatial_gradient(y_hat), spatial_gradient(y.detach())
    total = None
    for a, b in zip(gp, gt):
        term = nd.mean(nd.abs(nd.sub(a, b)))
        total = term if total is None else nd.add(total, term)
    return nd.mul(total, 1.0 / 3.0)


def reconstruction(y_hat, y, cfg: LossConfig) -> Tensor:
    base = cfg.recon_kind.split("+")[0]
    rec = mse(y_hat, y) if base == "mse" else vcc(y_hat, y, cfg.vcc_alpha, cfg.vcc_gamma, cfg.charbonnier_eps)
    if cfg.recon_kind.endswith("+ag"):
        rec = nd.add(rec, nd.mul(ag(y_hat, y), cfg.ag_weight))
    return rec


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, Tensor] = field(default_factory=dict)  # weighted; sums to total
    raw: dict[str, float] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.terms.items()}


def total_loss(out, y, cfg: LossConfig) -> LossBreakdown:
    """``L_rec + l_vq*L_VQ + l_info*L_info + l_skip*L_skip`` with per-term logging."""
    rec = reconstruction(out.y_hat, y, cfg)
    raw = {"rec": rec, "vq": out.vq_loss, "info": out.info_loss, "skip": out.skip_loss}
    weights = {"rec": 1.0, "vq": cfg.lambda_vq, "info": cfg.lambda_info, "skip": cfg.lambda_skip}
    terms = {k: (raw[k] if weights[k] == 1.0 else nd.mul(raw[k], weights[k])) for k in raw}
    total = terms["rec"]
    for k in ("vq", "info", "skip"):
        total = nd.add(total, terms[k])
    return LossBreakdown(total, terms, {k: v.item() for k, v in raw.items()})
