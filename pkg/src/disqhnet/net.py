"""The synthesis network: multi-kernel conv blocks, RU/C encoders, quantized
PID latents and an edge-conditioned Half-UNet decoder.

All volumes are ``[C, D, H, W]`` without a batch axis; mini-batches are
formed by gradient accumulation over subjects.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import ndgrad as nd
from . import edges, pid, vq
from .errors import ConfigError, ModeError, ShapeError
from .ndgrad import Tensor

KERNEL_SIZES = (1, 3, 5, 7)
PLAYERS = ("r", "u1", "u2", "c")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------
@dataclass
class ModelConfig:
    ru_widths: tuple[int, ...] = (8, 16, 32, 64)
    c_widths: tuple[int, ...] = (4, 8, 16, 32)
    p: int = 32
    ru_K: int = 4096
    c_K: int = 4096
    enc_blocks: int = 3
    dec_blocks: int = 3
    skip_channels: int = 8
    latent_pseudo_skip: bool = False
    residual: bool = True
    beta: float = 0.25
    ema_decay: float = 0.99
    learnable_codebook: bool = False
    tau: float = 1.0
    stabilizer: str = "mix"
    p_swap: float = 0.5
    max_locations: int = pid.MAX_LOCATIONS
    info: pid.InfoLossWeights = field(default_factory=pid.InfoLossWeights)
    seed: int = 0

    def __post_init__(self):
        self.ru_widths = tuple(int(w) for w in self.ru_widths)
        self.c_widths = tuple(int(w) for w in self.c_widths)
        if isinstance(self.info, dict):
            self.info = pid.InfoLossWeights(**self.info)
        self.validate()

    @property
    def stages(self) -> int:
        return len(self.ru_widths)

    @property
    def pyramid_depth(self) -> int:
        return self.stages

    def validate(self) -> None:
        if not self.ru_widths or len(self.ru_widths) != len(self.c_widths):
            raise ConfigError("RU and C encoders need the same non-zero number of stages")
        if min(self.ru_widths + self.c_widths) < 1 or self.p < 1:
            raise ConfigError("widths and p must be positive")
        if self.ru_K < 4 or self.ru_K % 2:
            raise ConfigError("ru_K must be even and >= 4 (split into R and U halves)")
        if self.c_K < 2:
            raise ConfigError("c_K must be >= 2")
        if self.enc_blocks < 1 or self.dec_blocks < 1 or self.skip_channels < 1:
            raise ConfigError("block counts and skip_channels must be >= 1")
        if self.stabilizer not in ("none", "swap", "mix", "choose"):
            raise ConfigError(f"unknown stabilizer {self.stabilizer!r}")
        if not 0.0 <= self.p_swap <= 1.0:
            raise ConfigError("p_swap must lie in [0, 1]")
        if self.tau <= 0 or self.beta < 0 or not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("tau > 0, beta >= 0 and decay in [0, 1) are required")

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        base = dict(ru_widths=(4, 8), c_widths=(4, 8), p=8, ru_K=64, c_K=64, enc_blocks=1,
                    dec_blocks=1, skip_channels=2, max_locations=512)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ru_widths"] = list(self.ru_widths)
        d["c_widths"] = list(self.c_widths)
        return d


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------
class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return nd.parameter(rng.normal(scale=math.sqrt(2.0 / fan_in), size=shape))


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 zero: bool = False):
        self.weight = _he(rng, (c_out, c_in, k, k, k), c_in * k ** 3)
        if zero:  # output heads start at a constant prediction
            self.weight.data = np.zeros_like(self.weight.data)
        self.bias = nd.parameter(np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        k = self.weight.shape[2]
        return nd.conv3d(x, self.weight, self.bias, stride=self.stride, padding=k // 2)


def branch_channels(c_out: int) -> list[int]:
    """Even split over the kernel sizes, remainder to the 1x1x1 branch."""
    b, rem = divmod(c_out, len(KERNEL_SIZES))
    return [b + rem] + [b] * (len(KERNEL_SIZES) - 1)


class MkConvBlock(Module):
    """Parallel 1/3/5/7 convolutions, concatenated, then InstanceNorm and Mish.

    The branches are fused into one 7x7x7 kernel (smaller kernels zero-padded),
    which is numerically the same as running them separately. With
    ``residual`` a 1x1x1 projection of the input is added to the output.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1,
                 residual: bool = True):
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.branches = [Conv(c_in, c, k, rng) for c, k in zip(branch_channels(c_out), KERNEL_SIZES) if c]
        self.shortcut = Conv(c_in, c_out, 1, rng, stride=stride) if residual else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.c_in:
            raise ShapeError(f"block expects {self.c_in} channels, got {x.shape[0]}")
        big = KERNEL_SIZES[-1]
        kernel = nd.concat([nd.embed_kernel(b.weight, big) for b in self.branches], axis=0)
        bias = nd.concat([b.bias for b in self.branches], axis=0)
        y = nd.conv3d(x, kernel, bias, stride=self.stride, padding=big // 2)
        y = nd.mish(nd.instance_norm(y))
        if self.shortcut is not None:
            y = nd.add(y, self.shortcut(x))
        return y


class Encoder(Module):
    """Stride-2 MKConv stages followed by a 1x1x1 pre-quantization projection."""

    def __init__(self, c_in: int, widths: Sequence[int], blocks: int, c_out: int,
                 rng: np.random.Generator, residual: bool = True):
        self.c_in = c_in
        self.stages = []
        prev = c_in
        for w in widths:
            stage = [MkConvBlock(prev, w, rng, stride=2, residual=residual)]
            stage += [MkConvBlock(w, w, rng, residual=residual) for _ in range(blocks - 1)]
            self.stages.append(_Seq(stage))
            prev = w
        self.proj = Conv(prev, c_out, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[0] != self.c_in:
            raise ShapeError(f"encoder expects [{self.c_in},D,H,W], got {x.shape}")
        for stage in self.stages:
            x = stage(x)
        return self.proj(x)


class _Seq(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Decoder(Module):
    """Half-UNet decoder: no encoder skips, only pseudo-skips from the edge pyramid.

    ``head`` runs at latent resolution on the concatenated ``[r, u1, u2, c]``.
    Stage ``l`` (finest is 0) upsamples to pyramid level ``l``, concatenates a
    1x1x1 projection of the edge level, and applies its MKConv blocks.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        S, p, res = cfg.stages, cfg.p, cfg.residual
        dw = list(reversed(cfg.ru_widths))
        width = [dw[min(S - l, S - 1)] for l in range(S)]  # width of stage l
        self.stages_n = S
        self.head = _Seq([MkConvBlock(4 * p, dw[0], rng, residual=res)]
                         + [MkConvBlock(dw[0], dw[0], rng, residual=res) for _ in range(cfg.dec_blocks - 1)])
        psi_in = 1 + (p if cfg.latent_pseudo_skip else 0)
        self.psi = [None] * S
        self.stages = [None] * S
        self.aux = [None] * S
        prev = dw[0]
        for l in reversed(range(S)):
            w = width[l]
            self.psi[l] = Conv(psi_in, cfg.skip_channels, 1, rng)
            self.stages[l] = _Seq([MkConvBlock(prev + cfg.skip_channels, w, rng, residual=res)]
                                  + [MkConvBlock(w, w, rng, residual=res) for _ in range(cfg.dec_blocks - 1)])
            self.aux[l] = Conv(w, 1, 1, rng, zero=True)
            prev = w
        self.out = Conv(prev, 1, 1, rng, zero=True)
        self.latent_pseudo_skip = cfg.latent_pseudo_skip

    def __call__(self, codes: dict[str, Tensor], pyramid: edges.EdgePyramid, with_aux: bool = True):
        if len(pyramid) != self.stages_n:
            raise ShapeError(f"pyramid has {len(pyramid)} levels, decoder has {self.stages_n} stages")
        with nd.scope("decoder"):
            d = self.head(nd.concat([codes[k] for k in PLAYERS], axis=0))
            recons: list[Optional[Tensor]] = [None] * self.stages_n
            for l in reversed(range(self.stages_n)):
                level = Tensor(pyramid[l])
                level.tags.add("edge")
                shape = level.shape[1:]
                s_in = level
                if self.latent_pseudo_skip:
                    s_in = nd.concat([level, nd.trilinear_resize(codes["r"], shape)], axis=0)
                d = self.stages[l](nd.concat([nd.trilinear_resize(d, shape), self.psi[l](s_in)], axis=0))
                if with_aux:
                    recons[l] = self.aux[l](d)
            y = self.out(d)
        return y, (recons if with_aux else [])


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------
@dataclass
class Latent:
    continuous: Tensor  # [p, d, h, w]
    quantized: Tensor  # [p, d, h, w]
    indices: Optional[np.ndarray]
    result: Optional[vq.QuantizeResult]


@dataclass
class ForwardOutput:
    y_hat: Tensor
    latents: Optional[pid.PidLatents]
    skip_recons: list[Tensor]
    vq_losses: dict[str, Tensor]
    info_loss: Tensor
    skip_loss: Tensor
    codes: dict[str, Tensor]
    parts: dict[str, Latent]
    pyramid: edges.EdgePyramid
    swapped: bool = False

    @property
    def vq_loss(self) -> Tensor:
        return nd.add(self.vq_losses["codebook"], self.vq_losses["commitment"])


def _to_rows(h: Tensor) -> Tensor:
    c = h.shape[0]
    return nd.reshape(nd.transpose(h, (1, 2, 3, 0)), (h.size // c, c))


def _to_map(rows: Tensor, spatial) -> Tensor:
    c = rows.shape[1]
    return nd.transpose(nd.reshape(rows, tuple(spatial) + (c,)), (3, 0, 1, 2))


def skip_loss(skip_recons: Sequence[Tensor], m_hat) -> Tensor:
    """Mean over levels of the per-voxel squared error to the resized edge map."""
    if not skip_recons:
        return Tensor(0.0)
    src = nd.as_tensor(m_hat)
    total = None
    for rec in skip_recons:
        rec = nd.as_tensor(rec)
        with nd.no_grad():
            target = nd.trilinear_resize(src, rec.shape[1:]) if src.shape[1:] != rec.shape[1:] else src
        diff = nd.sub(rec, Tensor(target.data))
        term = nd.mean(nd.mul(diff, diff))
        total = term if total is None else nd.add(total, term)
    return nd.mul(total, 1.0 / len(skip_recons))


class DisQHNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.ru_encoder = Encoder(1, cfg.ru_widths, cfg.enc_blocks, 2 * cfg.p, rng, cfg.residual)
        self.c_encoder = Encoder(2, cfg.c_widths, cfg.enc_blocks, cfg.p, rng, cfg.residual)
        self.decoder = Decoder(cfg, rng)
        cb_rng = np.random.default_rng(cfg.seed + 1)
        self.ru_codebook = vq.Codebook.random(cfg.ru_K, cfg.p, cb_rng, decay=cfg.ema_decay,
                                              learnable=cfg.learnable_codebook)
        self.c_codebook = vq.Codebook.random(cfg.c_K, cfg.p, cb_rng, decay=cfg.ema_decay,
                                             learnable=cfg.learnable_codebook)
        self.quantize_enabled = True

    # codebook slices: the RU book is split row-wise into E^R and E^U
    @property
    def r_rows(self) -> slice:
        return slice(0, self.cfg.ru_K // 2)

    @property
    def u_rows(self) -> slice:
        return slice(self.cfg.ru_K // 2, self.cfg.ru_K)

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        for name in ("ru_codebook", "c_codebook"):
            cb = getattr(self, name)
            if cb.learnable:
                yield f"{prefix}{name}.weight", cb.weight

    def book_for(self, part: str) -> tuple[vq.Codebook, Optional[slice]]:
        if part in ("r", "r1", "r2"):
            return self.ru_codebook, self.r_rows
        if part in ("u", "u1", "u2"):
            return self.ru_codebook, self.u_rows
        if part == "c":
            return self.c_codebook, None
        raise ConfigError(f"unknown partition {part!r}")

    def _quantize(self, h: Tensor, part: str, track_usage: bool) -> Latent:
        if not self.quantize_enabled:
            return Latent(h, h, None, None)
        cb, rows = self.book_for(part)
        with nd.scope("quantize"):
            res = vq.quantize(_to_rows(h), cb, beta=self.cfg.beta, rows=rows, track_usage=track_usage)
            q = _to_map(res.quantized, h.shape[1:])
        return Latent(h, q, res.indices, res)

    def encode_ru(self, x, track_usage: bool = True) -> tuple[Latent, Latent]:
        x = nd.as_tensor(x)
        if x.ndim != 4 or x.shape[0] != 1:
            raise ShapeError(f"RU encoder expects a single-channel volume, got {x.shape}")
        with nd.scope("encoder/ru"):
            h = self.ru_encoder(x)
            p = self.cfg.p
            h_r, h_u = h[:p], h[p:]
        return self._quantize(h_r, "r", track_usage), self._quantize(h_u, "u", track_usage)

    def encode_c(self, x_cat, track_usage: bool = True) -> Latent:
        x_cat = nd.as_tensor(x_cat)
        if x_cat.ndim != 4 or x_cat.shape[0] != 2:
            raise ShapeError(f"C encoder expects a two-channel volume, got {x_cat.shape}")
        with nd.scope("encoder/c"):
            h = self.c_encoder(x_cat)
        return self._quantize(h, "c", track_usage)

    def decode(self, codes: dict[str, Tensor], pyramid: edges.EdgePyramid, with_aux: bool = True):
        return self.decoder(codes, pyramid, with_aux)

    def pid_latents(self, parts: dict[str, Latent], rng: Optional[np.random.Generator]) -> pid.PidLatents:
        """Continuous partitions at shared sampled locations, with soft code assignments."""
        rows = {k: _to_rows(v.continuous) for k, v in parts.items()}
        m_total = rows["c"].shape[0]
        loc = pid.sample_locations(m_total, rng, self.cfg.max_locations)
        if loc.size < m_total:
            rows = {k: nd.take(v, loc, axis=0) for k, v in rows.items()}
        lat = pid.PidLatents(rows["r1"], rows["u1"], rows["r2"], rows["u2"], rows["c"])
        for k, z in rows.items():
            cb, sl = self.book_for(k)
            codes = cb.weight if sl is None else nd.slice(cb.weight, sl)
            lat.assign[k] = pid.soft_assign(z, codes, self.cfg.tau)
        return lat

    def forward(self, x1, x2, mode: str = "train", rng: Optional[np.random.Generator] = None,
                ablate: Optional[dict[str, np.ndarray]] = None, pyramid: Optional[edges.EdgePyramid] = None,
                track_usage: Optional[bool] = None) -> ForwardOutput:
        """Encode, quantize, factorize and decode one subject.

        ``ablate`` maps partition names (``r``, ``u1``, ``u2``, ``c``) to
        replacement code maps; the decoder sees those instead of the
        quantized latents. ``pyramid`` may be passed to reuse a cached one.
        """
        if mode not in ("train", "infer"):
            raise ModeError(f"unknown mode {mode!r}")
        train = mode == "train"
        x1, x2 = nd.as_tensor(x1), nd.as_tensor(x2)
        if x1.shape != x2.shape or x1.ndim != 4 or x1.shape[0] != 1:
            raise ShapeError(f"modalities must be co-shaped single-channel volumes: {x1.shape} vs {x2.shape}")
        S = self.cfg.stages
        if any(n % 2 ** S for n in x1.shape[1:]):
            raise ShapeError(f"spatial extents {x1.shape[1:]} must be divisible by {2 ** S}")
        if train and rng is None:
            raise ValueError("train mode needs an rng")
        track = train if track_usage is None else track_usage
        cfg = self.cfg

        if pyramid is None:
            pyramid = edges.edge_pyramid(x1, cfg.pyramid_depth)
        swapped = train and cfg.stabilizer == "swap" and pid.should_swap(rng, cfg.p_swap)
        a, b = (x2, x1) if swapped else (x1, x2)
        r1, u1 = self.encode_ru(a, track)
        r2, u2 = self.encode_ru(b, track)
        c = self.encode_c(nd.concat([x1, x2], axis=0), track)
        parts = {"r1": r1, "u1": u1, "r2": r2, "u2": u2, "c": c}

        r_dec = r1.quantized
        if train and cfg.stabilizer in ("mix", "choose"):
            r_dec = pid.stabilize_redundant(r1.quantized, r2.quantized, cfg.stabilizer, rng)
        codes = {"r": r_dec, "u1": u1.quantized, "u2": u2.quantized, "c": c.quantized}
        for name, value in (ablate or {}).items():
            if name not in codes:
                raise ConfigError(f"unknown player {name!r}")
            v = Tensor(value)
            v.tags.add("bottleneck")
            if v.shape != codes[name].shape:
                raise ShapeError(f"ablation value for {name} has shape {v.shape}, expected {codes[name].shape}")
            codes[name] = v

        y_hat, recons = self.decode(codes, pyramid, with_aux=train)

        zero = Tensor(0.0)
        vq_terms = {"codebook": zero, "commitment": zero}
        if self.quantize_enabled:
            for lat in parts.values():
                vq_terms["codebook"] = nd.add(vq_terms["codebook"], lat.result.codebook_loss)
                vq_terms["commitment"] = nd.add(vq_terms["commitment"], lat.result.commitment_loss)
        latents, info = None, zero
        if train and self.quantize_enabled:
            latents = self.pid_latents(parts, rng)
            info = pid.info_loss(latents, cfg.info)
        sk = skip_loss(recons, pyramid[0]) if train else zero
        return ForwardOutput(y_hat, latents, recons, vq_terms, info, sk, codes, parts, pyramid, swapped)

    __call__ = forward

    # -- state ------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        for name in ("ru_codebook", "c_codebook"):
            cb = getattr(self, name)
            state[f"{name}.embeddings"] = cb.embeddings.copy()
            state[f"{name}.ema_counts"] = cb.ema_counts.copy()
            state[f"{name}.ema_sums"] = cb.ema_sums.copy()
            state[f"{name}.usage"] = cb.usage.copy()
        state["quantize_enabled"] = np.array(float(self.quantize_enabled))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, t in params.items():
            if name.endswith("codebook.weight"):
                continue
            if name not in state or state[name].shape != t.shape:
                raise ShapeError(f"state is missing or misshapes parameter {name}")
            t.data = np.array(state[name], dtype=np.float64)
        for name in ("ru_codebook", "c_codebook"):
            cb = getattr(self, name)
            cb.ema_counts = np.array(state[f"{name}.ema_counts"], dtype=np.float64)
            cb.ema_sums = np.array(state[f"{name}.ema_sums"], dtype=np.float64)
            cb.usage = np.array(state[f"{name}.usage"], dtype=np.float64)
            cb.set_embeddings(state[f"{name}.embeddings"])
        self.quantize_enabled = bool(state.get("quantize_enabled", np.array(1.0)))

    def encoder_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if n.startswith(("ru_encoder", "c_encoder"))]


def bottleneck_audit(out: ForwardOutput) -> list[str]:
    """Walk the recorded graph back from every decoder output.

    Traversal stops at quantized latents (tag ``bottleneck``) and edge
    pyramid levels (tag ``edge``). Any encoder-scoped tensor reached
    otherwise is a leak; the descriptions of such tensors are returned (an
    empty list means the decoder is bottleneck-accountable).
    """
    roots = [out.y_hat] + [r for r in out.skip_recons if r is not None]
    leaks, seen = [], set()
    stack = list(roots)
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen.add(t.id)
        if t.tags & {"bottleneck", "edge"}:
            continue
        if t.scope.startswith("encoder"):
            leaks.append(f"{t.op}@{t.scope}")
            continue
        stack.extend(t.parents)
    return leaks
