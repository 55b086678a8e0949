"""Run configuration and its INI-style text format.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments. Sections: ``model``, ``info``, ``loss``, ``train``,
``data``, ``eval``, ``attribute``. Tuples are comma separated; booleans
are ``true``/``false``. Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .losses import LossConfig
from .net import ModelConfig
from .pid import InfoLossWeights
from .shapley import ABLATIONS


@dataclass
class TrainConfig:
    epochs: int = 1000
    warmup_epochs: int = 20
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    accumulation: int = 8
    subjects_per_epoch: int = 64
    val_fraction: float = 0.25
    checkpoint_every: int = 50
    kmeans_iters: int = 20
    reservoir_size: int = 4096
    augment: bool = True
    restart_dead_codes: bool = True
    seed: int = 0
    manifest: str = ""

    def validate(self) -> None:
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need epochs >= 1 and 0 <= warmup_epochs < epochs")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError("need 0 < lr_min <= lr_max")
        if self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("invalid optimizer hyperparameters")
        if self.accumulation < 1 or self.subjects_per_epoch < 1 or self.checkpoint_every < 1:
            raise ConfigError("accumulation, subjects_per_epoch and checkpoint_every must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.kmeans_iters < 1 or self.reservoir_size < 2:
            raise ConfigError("kmeans_iters >= 1 and reservoir_size >= 2 are required")


@dataclass
class DataConfig:
    n_subjects: int = 32
    shape: tuple[int, ...] = (16, 16, 16)
    w_red: float = 1.0
    w_u1: float = 0.0
    w_u2: float = 0.0
    w_syn: float = 0.0
    noise_sigma: float = 0.01
    smoothness: float = 3.0
    structure_smoothness: float = 1.0
    structure_gain: float = 0.5
    roi_hint: float = 0.5
    stages: tuple[str, ...] = ("CN", "I/II", "III/IV", "V/VI")
    seed: int = 0

    def validate(self) -> None:
        from .evalkit import STAGES
        if self.n_subjects < 1 or len(self.shape) != 3:
            raise ConfigError("need n_subjects >= 1 and a 3D shape")
        if any(s not in STAGES for s in self.stages) or not self.stages:
            raise ConfigError(f"stages must be drawn from {STAGES}")
        if min(self.w_red, self.w_u1, self.w_u2, self.w_syn, self.noise_sigma, self.structure_gain) < 0:
            raise ConfigError("mix weights, gains and noise must be non-negative")
        if min(self.smoothness, self.structure_smoothness) <= 0:
            raise ConfigError("smoothness values must be positive")

    def phantom_spec(self):
        from .phantom import PhantomSpec
        return PhantomSpec(shape=self.shape, seed=self.seed, w_red=self.w_red, w_u1=self.w_u1, w_u2=self.w_u2,
                           w_syn=self.w_syn, noise_sigma=self.noise_sigma, smoothness=self.smoothness,
                           structure_smoothness=self.structure_smoothness, structure_gain=self.structure_gain,
                           roi_hint=self.roi_hint)


@dataclass
class EvalConfig:
    ssim_window: int = 7
    high_uptake_threshold: float = 1.3

    def validate(self) -> None:
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigError("ssim_window must be a positive odd integer")


@dataclass
class AttributeConfig:
    ablation: str = "mean-code"

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    attribute: AttributeConfig = field(default_factory=AttributeConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        for part in (self.train, self.data, self.eval, self.attribute):
            part.validate()
        return self

    @classmethod
    def toy(cls) -> "RunConfig":
        """Desk-scale settings: 2-stage 16^3 model, faster schedule, 3^3 SSIM window."""
        return cls(model=ModelConfig.toy(),
                   train=TrainConfig(epochs=300, warmup_epochs=20, lr_max=3e-3, lr_min=3e-4,
                                     accumulation=4, subjects_per_epoch=24, checkpoint_every=50,
                                     reservoir_size=2048),
                   eval=EvalConfig(ssim_window=3))


# --------------------------------------------------------------------------
# text format
# --------------------------------------------------------------------------
_SECTIONS = {"model": ("model", ModelConfig), "info": (None, InfoLossWeights), "loss": ("loss", LossConfig),
             "train": ("train", TrainConfig), "data": ("data", DataConfig), "eval": ("eval", EvalConfig),
             "attribute": ("attribute", AttributeConfig)}


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, like: Any, where: str) -> Any:
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(like[0]) if like else str
            return tuple(kind(x) for x in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(like).__name__}") from None


def _section_values(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.name != "info"}


def to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec, (attr, _) in _SECTIONS.items():
        obj = cfg.model.info if attr is None else getattr(cfg, attr)
        cp[sec] = {k: _format(v) for k, v in _section_values(obj).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def from_ini(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(cp.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    base = RunConfig()
    built: dict[str, Any] = {}
    for sec, (attr, cls) in _SECTIONS.items():
        obj = base.model.info if attr is None else getattr(base, attr)
        values = _section_values(obj)
        if cp.has_section(sec):
            for key, raw in cp[sec].items():
                if key not in values:
                    raise ConfigError(f"[{sec}] unknown key {key!r}")
                values[key] = _parse(raw, values[key], f"[{sec}] {key}")
        built[sec] = values
    try:
        info = InfoLossWeights(**built["info"])
        model = ModelConfig(**built["model"], info=info)
        cfg = RunConfig(model=model, loss=LossConfig(**built["loss"]), train=TrainConfig(**built["train"]),
                        data=DataConfig(**built["data"]), eval=EvalConfig(**built["eval"]),
                        attribute=AttributeConfig(**built["attribute"]))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return from_ini(p.read_text())


def replace(cfg: RunConfig, **sections) -> RunConfig:
    return dataclasses.replace(cfg, **sections)
