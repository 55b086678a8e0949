"""Training loop: warmup without quantization, k-means codebook seeding, then
quantized training with EMA codebooks, AdamW and a cosine learning rate."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import config as config_mod
from . import edges, losses, pid, vq
from . import ndgrad as nd
from .errors import NumericsError
from .net import DisQHNet
from .phantom import Subject, augment

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "elapsed_s", "phase", "lr", "loss", "rec", "vq", "info", "skip", "val_rec",
               "ppl_ru", "ppl_c", "nmi_u1_u2", "nmi_r1_r2", "nmi_c_r1", "nmi_c_u1")


class AdamW:
    """Adam with decoupled weight decay (decay applied to the weights, not the gradient)."""

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for n, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * update

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{n}": a for n, a in self.m.items()}
        out.update({f"opt.v.{n}": a for n, a in self.v.items()})
        return out

    def load(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for n, _ in self.params:
            self.m[n] = tensors[f"opt.m.{n}"].copy()
            self.v[n] = tensors[f"opt.v.{n}"].copy()
        self.t = t


def cosine_lr(epoch: int, epochs: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` at epoch 0 to ``lr_min`` at the last epoch."""
    if epochs <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def split_subjects(subjects: Sequence[Subject], val_fraction: float, seed: int):
    n = len(subjects)
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    order = np.random.default_rng(seed).permutation(n)
    val = sorted(order[:n_val])
    train = sorted(order[n_val:])
    return [subjects[i] for i in train], [subjects[i] for i in val]


@dataclass
class EpochRecord:
    epoch: int
    elapsed_s: float
    phase: str
    lr: float
    terms: dict[str, float]
    val_rec: float
    ppl_ru: float = float("nan")
    ppl_c: float = float("nan")
    nmi: dict[str, float] = field(default_factory=dict)

    def row(self) -> list[str]:
        vals = [self.epoch, f"{self.elapsed_s:.3f}", self.phase, _f(self.lr), _f(self.terms["total"]),
                _f(self.terms["rec"]), _f(self.terms["vq"]), _f(self.terms["info"]), _f(self.terms["skip"]),
                _f(self.val_rec), _f(self.ppl_ru), _f(self.ppl_c)]
        vals += [_f(self.nmi.get(k, float("nan"))) for k in ("u1_u2", "r1_r2", "c_r1", "c_u1")]
        return [str(v) for v in vals]


def _f(x: float) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


class Trainer:
    def __init__(self, cfg: config_mod.RunConfig, train_set: Sequence[Subject], val_set: Sequence[Subject],
                 out_dir=None):
        cfg.validate()
        if not train_set or not val_set:
            raise ValueError("need non-empty training and validation sets")
        self.cfg = cfg
        self.train_set, self.val_set = list(train_set), list(val_set)
        self.model = DisQHNet(cfg.model)
        t = cfg.train
        self.opt = AdamW(self.model.named_parameters(), t.lr_max, (t.beta1, t.beta2), t.adam_eps, t.weight_decay)
        self.epoch = 0
        self.best_val = math.inf
        self.history: list[EpochRecord] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model.quantize_enabled = t.warmup_epochs == 0
        self._pyramids: dict[str, edges.EdgePyramid] = {}
        self._t0 = time.perf_counter()
        self.last_batch: list[str] = []
        self._recent: list = []

    # -- helpers ------------------------------------------------------------
    def _pyramid(self, s: Subject, augmented: bool) -> edges.EdgePyramid:
        if augmented:
            return edges.edge_pyramid(s.x1, self.cfg.model.pyramid_depth)
        if s.subject_id not in self._pyramids:
            self._pyramids[s.subject_id] = edges.edge_pyramid(s.x1, self.cfg.model.pyramid_depth)
        return self._pyramids[s.subject_id]

    def _ema_step(self, batch: list) -> None:
        m = self.model
        ru_h, ru_i, c_h, c_i = [], [], [], []
        for parts in batch:
            for k in ("r1", "u1", "r2", "u2"):
                ru_h.append(_rows(parts[k].continuous))
                ru_i.append(parts[k].indices.reshape(-1))
            c_h.append(_rows(parts["c"].continuous))
            c_i.append(parts["c"].indices.reshape(-1))
        if not m.ru_codebook.learnable:
            vq.ema_update(m.ru_codebook, np.concatenate(ru_h), np.concatenate(ru_i))
            vq.ema_update(m.c_codebook, np.concatenate(c_h), np.concatenate(c_i))

    def _opt_step(self, lr: float, batch: list) -> None:
        self.opt.step(lr)
        self.opt.zero_grad()
        if self.model.quantize_enabled:
            if self.model.ru_codebook.learnable:
                self.model.ru_codebook.sync_from_weight()
                self.model.c_codebook.sync_from_weight()
            else:
                self._ema_step(batch)
                self._recent = batch

    def init_codebooks(self) -> None:
        """k-means seeding of every codebook slice from continuous latents of the training set."""
        m, t = self.model, self.cfg.train
        seed = t.seed
        res = {k: vq.Reservoir(t.reservoir_size, m.cfg.p, seed + i) for i, k in enumerate(("r", "u", "c"))}
        was = m.quantize_enabled
        m.quantize_enabled = False
        with nd.no_grad():
            for s in self.train_set:
                out = m.forward(s.x1, s.x2, mode="infer", pyramid=self._pyramid(s, False), track_usage=False)
                res["r"].add(_rows(out.parts["r1"].continuous))
                res["r"].add(_rows(out.parts["r2"].continuous))
                res["u"].add(_rows(out.parts["u1"].continuous))
                res["u"].add(_rows(out.parts["u2"].continuous))
                res["c"].add(_rows(out.parts["c"].continuous))
        m.quantize_enabled = was
        vq.kmeans_init(m.ru_codebook, res["r"].samples, t.kmeans_iters, seed, rows=m.r_rows)
        # kmeans_init resets EMA stats for the whole book, so seed U after R
        vq.kmeans_init(m.ru_codebook, res["u"].samples, t.kmeans_iters, seed + 1, rows=m.u_rows)
        vq.kmeans_init(m.c_codebook, res["c"].samples, t.kmeans_iters, seed + 2)

    def restart_dead_codes(self, rng: np.random.Generator) -> int:
        """Reseed codes unused this epoch from the latents of the last optimizer step."""
        m = self.model
        if not self._recent or m.ru_codebook.learnable:
            return 0
        pool = {key: np.concatenate([_rows(parts[k].continuous) for parts in self._recent for k in ks])
                for key, ks in (("r", ("r1", "r2")), ("u", ("u1", "u2")), ("c", ("c",)))}
        n = vq.restart_dead_codes(m.ru_codebook, pool["r"], rng, m.r_rows)
        n += vq.restart_dead_codes(m.ru_codebook, pool["u"], rng, m.u_rows)
        n += vq.restart_dead_codes(m.c_codebook, pool["c"], rng)
        return n

    # -- epochs -------------------------------------------------------------
    def train_epoch(self) -> EpochRecord:
        cfg, t, m = self.cfg, self.cfg.train, self.model
        e = self.epoch
        rng = np.random.default_rng([t.seed, e])
        lr = cosine_lr(e, t.epochs, t.lr_max, t.lr_min)
        m.ru_codebook.reset_usage()
        m.c_codebook.reset_usage()
        n = len(self.train_set)
        k = t.subjects_per_epoch
        order = rng.choice(n, size=k, replace=k > n) if k != n else rng.permutation(n)
        sums = {key: 0.0 for key in ("total", "rec", "vq", "info", "skip")}
        nmi_sums: dict[str, float] = {}
        batch, self.last_batch = [], []
        self.opt.zero_grad()
        for j, idx in enumerate(order):
            s = self.train_set[int(idx)]
            if t.augment:
                s = augment(s, rng)
            self.last_batch.append(s.subject_id)
            try:
                out = m.forward(s.x1, s.x2, mode="train", rng=rng, pyramid=self._pyramid(s, t.augment))
                br = losses.total_loss(out, s.y, cfg.loss)
                if not np.isfinite(br.total.data).all():
                    raise NumericsError("non-finite training loss")
                nd.mul(br.total, 1.0 / t.accumulation).backward()
            except NumericsError as exc:
                self._dump_diagnostics(exc)
                raise
            sums["total"] += br.total.item()
            for key, v in br.terms.items():
                sums[key] += v.item()
            if out.latents is not None:
                for key, val in _nmi_diagnostics(out.latents).items():
                    nmi_sums[key] = nmi_sums.get(key, 0.0) + val
            if m.quantize_enabled:
                batch.append(out.parts)
            if (j + 1) % t.accumulation == 0 or j == len(order) - 1:
                self._opt_step(lr, batch)
                batch, self.last_batch = [], []
        terms = {key: v / len(order) for key, v in sums.items()}
        nmi_means = {key: v / len(order) for key, v in nmi_sums.items()}
        phase = "quantized" if m.quantize_enabled else "warmup"
        ppl_ru = ppl_c = float("nan")
        if m.quantize_enabled:
            ppl_ru = vq.codebook_perplexity(m.ru_codebook.usage)
            ppl_c = vq.codebook_perplexity(m.c_codebook.usage)
            if t.restart_dead_codes:
                self.restart_dead_codes(rng)
        self.epoch += 1
        if not m.quantize_enabled and self.epoch >= t.warmup_epochs:
            self.init_codebooks()
            m.quantize_enabled = True
        val = self.validate()
        return EpochRecord(e + 1, time.perf_counter() - self._t0, phase, lr, terms, val, ppl_ru, ppl_c, nmi_means)

    def validate(self) -> float:
        total = 0.0
        with nd.no_grad():
            for s in self.val_set:
                out = self.model.forward(s.x1, s.x2, mode="infer", pyramid=self._pyramid(s, False),
                                         track_usage=False)
                total += losses.reconstruction(out.y_hat, s.y, self.cfg.loss).item()
        return total / len(self.val_set)

    def run(self, epochs: Optional[int] = None, on_epoch: Optional[Callable[[EpochRecord], None]] = None):
        """Train up to ``epochs`` (default: the configured total), checkpointing as configured."""
        stop = self.cfg.train.epochs if epochs is None else min(self.cfg.train.epochs, epochs)
        while self.epoch < stop:
            rec = self.train_epoch()
            self.history.append(rec)
            improved = rec.phase == "quantized" and rec.val_rec < self.best_val
            if improved:
                self.best_val = rec.val_rec
            if self.out_dir is not None:
                if improved:
                    ckpt.save(self.checkpoint(), self.out_dir / "checkpoint_best.dqck")
                if self.epoch % self.cfg.train.checkpoint_every == 0 or self.epoch == self.cfg.train.epochs:
                    ckpt.save(self.checkpoint(), self.out_dir / "checkpoint_last.dqck")
            if on_epoch is not None:
                on_epoch(rec)
            log.info("epoch %d %s loss %.6f val_rec %.6f", rec.epoch, rec.phase, rec.terms["total"], rec.val_rec)
        return self.history

    # -- persistence ----------------------------------------------------------
    def checkpoint(self) -> ckpt.Checkpoint:
        tensors = dict(self.model.state_dict())
        tensors.update(self.opt.state())
        meta = {"epoch": self.epoch, "best_val": None if math.isinf(self.best_val) else self.best_val,
                "opt_t": self.opt.t, "format": "disqhnet"}
        return ckpt.Checkpoint(config_mod.to_ini(self.cfg), tensors, meta)

    @classmethod
    def from_checkpoint(cls, ck: ckpt.Checkpoint, train_set, val_set, out_dir=None) -> "Trainer":
        cfg = config_mod.from_ini(ck.config_text)
        tr = cls(cfg, train_set, val_set, out_dir)
        tr.model.load_state_dict(ck.tensors)
        tr.opt.load(ck.tensors, int(ck.meta["opt_t"]))
        tr.epoch = int(ck.meta["epoch"])
        tr.best_val = math.inf if ck.meta.get("best_val") is None else float(ck.meta["best_val"])
        return tr

    def _dump_diagnostics(self, exc: Exception) -> None:
        if self.out_dir is None:
            return
        lines = [f"error\t{exc}", f"epoch\t{self.epoch + 1}", "batch\t" + ",".join(self.last_batch)]
        (self.out_dir / "diagnostics.tsv").write_text("\n".join(lines) + "\n")


def _rows(h) -> np.ndarray:
    d = h.data if isinstance(h, nd.Tensor) else h
    return np.moveaxis(d, 0, -1).reshape(-1, d.shape[0])


def _nmi_diagnostics(lat: pid.PidLatents) -> dict[str, float]:
    A = lat.assign
    with nd.no_grad():
        return {"u1_u2": pid.nmi(A["u1"], A["u2"]).item(), "r1_r2": pid.nmi(A["r1"], A["r2"]).item(),
                "c_r1": pid.nmi(A["c"], A["r1"]).item(), "c_u1": pid.nmi(A["c"], A["u1"]).item()}


def model_from_checkpoint(ck: ckpt.Checkpoint) -> tuple[DisQHNet, config_mod.RunConfig]:
    cfg = config_mod.from_ini(ck.config_text)
    model = DisQHNet(cfg.model)
    model.load_state_dict(ck.tensors)
    return model, cfg
