"""Synthetic paired volumes with known redundant / unique / synergistic structure.

A shared fine-grained field ``S`` (the "anatomy") appears in both modalities,
a smooth field ``U1`` only in the first and ``U2`` only in the second. The
difference in spatial scale keeps every field identifiable from the inputs:
low-pass filtering a modality recovers its unique field. The target mixes ``g(S)``, ``g(U1)``,
``g(U2)`` and the interaction ``g(U1*U2)``; since ``U1`` and ``U2`` are
independent and symmetric, the product is uncorrelated with either factor, so
neither modality alone predicts the interaction term.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import evalkit
from .errors import FormatError, ShapeError

MAGIC = b"DVOL1\n"
BASELINE = 1.0
FIELD_AMPLITUDE = 0.25


@dataclass(frozen=True)
class Roi:
    label: int
    center: tuple[float, float, float]  # fractions of the extents
    radius: float  # fraction of the smallest extent


def default_rois() -> list[Roi]:
    return [
        Roi(evalkit.ROI_LABELS["I/II"], (0.3, 0.3, 0.5), 0.16),
        Roi(evalkit.ROI_LABELS["III/IV"], (0.7, 0.3, 0.5), 0.16),
        Roi(evalkit.ROI_LABELS["V/VI"], (0.5, 0.72, 0.3), 0.16),
        Roi(evalkit.ROI_LABELS["reference"], (0.5, 0.72, 0.74), 0.16),
    ]


# SUVR mean of each Braak ROI once its stage is reached; below-stage ROIs sit at 1.0
STAGE_UPLIFT = {"I/II": 1.35, "III/IV": 1.45, "V/VI": 1.55}


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (16, 16, 16)
    seed: int = 0
    w_red: float = 1.0
    w_u1: float = 0.0
    w_u2: float = 0.0
    w_syn: float = 0.0
    noise_sigma: float = 0.01
    smoothness: float = 3.0
    structure_smoothness: float = 1.0
    structure_gain: float = 0.5
    roi_layout: list[Roi] = field(default_factory=default_rois)
    stage: str = "CN"
    roi_hint: float = 0.5

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ShapeError("phantoms need three extents of at least 4")
        for name in ("w_red", "w_u1", "w_u2", "w_syn", "noise_sigma", "roi_hint", "structure_gain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.smoothness <= 0 or self.structure_smoothness <= 0:
            raise ValueError("smoothness values must be positive")
        if self.stage not in evalkit.STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        labels = [r.label for r in self.roi_layout]
        if evalkit.ROI_LABELS["reference"] not in labels:
            raise ValueError("layout needs a reference region")
        for r in self.roi_layout:
            if not all(0.0 <= c <= 1.0 for c in r.center) or r.radius <= 0:
                raise ValueError(f"ROI {r.label} lies outside the volume")


@dataclass
class Subject:
    x1: np.ndarray  # [1,D,H,W]
    x2: np.ndarray
    y: np.ndarray
    roi_mask: np.ndarray  # [D,H,W] integer labels
    stage_label: str
    subject_id: str = "sub-000"
    fields: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def reference_mask(self) -> np.ndarray:
        return self.roi_mask == evalkit.ROI_LABELS["reference"]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.y.shape[1:]


def smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Zero-mean, unit-std low-pass field (periodic gaussian blur of white noise)."""
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / f.std()


def orthogonalize(f: np.ndarray, basis: Sequence[np.ndarray]) -> np.ndarray:
    """Remove the projection on each (zero-mean, unit-std) basis field, then restandardize."""
    for b in basis:
        f = f - (f * b).mean() * b
    return (f - f.mean()) / f.std()


def roi_mask(shape, layout: Sequence[Roi]) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[np.arange(n) + 0.5 for n in shape], indexing="ij"), axis=-1)
    mask = np.zeros(shape, dtype=np.int64)
    smallest = min(shape)
    for r in layout:
        c = np.array(r.center) * np.array(shape)
        inside = ((grid - c) ** 2).sum(axis=-1) <= (r.radius * smallest) ** 2
        mask[inside & (mask == 0)] = r.label
    return mask


def generate(spec: PhantomSpec, subject_id: Optional[str] = None) -> Subject:
    rng = np.random.default_rng(spec.seed)
    shape = spec.shape
    S = smooth_field(rng, shape, spec.structure_smoothness)
    U1 = orthogonalize(smooth_field(rng, shape, spec.smoothness), [S])
    U2 = orthogonalize(smooth_field(rng, shape, spec.smoothness), [S, U1])
    syn = U1 * U2
    syn = (syn - syn.mean()) / syn.std()
    g = np.tanh
    n1, n2, ny = (rng.standard_normal(shape) * spec.noise_sigma for _ in range(3))

    x1 = spec.structure_gain * S + U1 + n1
    x2 = -spec.structure_gain * S + U2 + n2
    mix = spec.w_red * g(S) + spec.w_u1 * g(U1) + spec.w_u2 * g(U2) + spec.w_syn * g(syn)
    y = BASELINE + FIELD_AMPLITUDE * mix + ny

    mask = roi_mask(shape, spec.roi_layout)
    ref = mask == evalkit.ROI_LABELS["reference"]
    if not ref.any():
        raise ShapeError("reference region is empty at this resolution")
    ref_mean = y[ref].mean()
    rank = evalkit.stage_rank(spec.stage)
    for name in ("I/II", "III/IV", "V/VI"):
        region = mask == evalkit.ROI_LABELS[name]
        if not region.any():
            continue
        reached = evalkit.stage_rank(name) <= rank
        target = STAGE_UPLIFT[name] if reached else 1.0
        shift = target * ref_mean - y[region].mean()
        if reached or shift < 0:  # pull below-stage regions down to SUVR 1.0 only if above it
            y[region] += shift
        if reached:
            x2[region] += spec.roi_hint * (target - 1.0) / (STAGE_UPLIFT["V/VI"] - 1.0)

    subject = Subject(x1[None].copy(), x2[None].copy(), y[None].copy(), mask, spec.stage,
                      subject_id or f"sub-{spec.seed:03d}", {"S": S, "U1": U1, "U2": U2, "syn": syn})
    staged = evalkit.braak_stage(evalkit.roi_means(evalkit.suvr(subject.y, ref), mask))
    if staged != spec.stage:  # construction guarantees this; the check guards layout edits
        raise ValueError(f"generated subject stages as {staged}, expected {spec.stage}")
    return subject


def cohort(n: int, base: PhantomSpec, stages: Optional[Sequence[str]] = None) -> list[Subject]:
    """``n`` subjects with consecutive seeds; stages cycle through ``stages``."""
    stages = list(stages or evalkit.STAGES)
    return [generate(replace(base, seed=base.seed + i, stage=stages[i % len(stages)]),
                     subject_id=f"sub-{i:03d}") for i in range(n)]


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class Transform:
    """Optional flips followed by an affine map from output to input coordinates."""

    flips: tuple[bool, bool, bool] = (False, False, False)
    matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def is_identity_affine(self) -> bool:
        return np.array_equal(np.array(self.matrix), np.eye(3)) and not any(self.offset)


def random_transform(rng: np.random.Generator, shape, max_angle: float = 10.0,
                     scale_range=(0.9, 1.1), p_flip: float = 0.5) -> Transform:
    """Left-right flip, small rotation, and a random resized crop as one affine."""
    flips = (False, False, bool(rng.random() < p_flip))
    angles = np.deg2rad(rng.uniform(-max_angle, max_angle, size=3))
    R = np.eye(3)
    for ax, a in enumerate(angles):
        i, j = [k for k in range(3) if k != ax]
        rot = np.eye(3)
        rot[i, i] = rot[j, j] = np.cos(a)
        rot[i, j], rot[j, i] = -np.sin(a), np.sin(a)
        R = R @ rot
    scale = rng.uniform(*scale_range, size=3)
    A = R @ np.diag(1.0 / scale)
    center = (np.array(shape) - 1) / 2.0
    shift = rng.uniform(-1.0, 1.0, size=3) * 0.05 * np.array(shape)
    offset = center - A @ center + shift
    return Transform(flips, tuple(map(tuple, A)), tuple(offset))


def _apply(vol: np.ndarray, t: Transform, order: int) -> np.ndarray:
    out = vol
    for ax, f in enumerate(t.flips):
        if f:
            out = np.flip(out, axis=ax)
    out = np.ascontiguousarray(out)
    if t.is_identity_affine:
        return out.copy()
    return ndimage.affine_transform(out, np.array(t.matrix), offset=np.array(t.offset),
                                    order=order, mode="nearest")


def apply_transform(s: Subject, t: Transform) -> Subject:
    """Same spatial map for every volume; labels use nearest-neighbour sampling."""
    return Subject(
        x1=_apply(s.x1[0], t, 1)[None], x2=_apply(s.x2[0], t, 1)[None], y=_apply(s.y[0], t, 1)[None],
        roi_mask=_apply(s.roi_mask, t, 0).astype(np.int64), stage_label=s.stage_label,
        subject_id=s.subject_id)


def augment(s: Subject, rng: np.random.Generator, tries: int = 5, **kw) -> Subject:
    for _ in range(tries):
        out = apply_transform(s, random_transform(rng, s.shape, **kw))
        if out.reference_mask.any():
            return out
    return apply_transform(s, Transform())


# --------------------------------------------------------------------------
# DVOL volume files
# --------------------------------------------------------------------------
def encode_volume(volume) -> bytes:
    v = np.asarray(volume)
    if v.ndim < 2:
        raise ShapeError("a volume needs a channel axis and at least one spatial axis")
    extents = v.shape[1:]
    if v.shape[0] < 1 or min(extents) < 1:
        raise ShapeError(f"empty extents {v.shape}")
    head = MAGIC + struct.pack(f"<I{len(extents)}II", len(extents), *extents, v.shape[0])
    return head + np.ascontiguousarray(v, dtype="<f4").tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    if not buf.startswith(MAGIC):
        raise FormatError("bad magic: not a DVOL file")
    pos = len(MAGIC)
    if len(buf) < pos + 4:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if rank < 1 or len(buf) < pos + 4 * (rank + 1):
        raise FormatError("invalid rank or truncated header")
    dims = struct.unpack_from(f"<{rank + 1}I", buf, pos)
    pos += 4 * (rank + 1)
    extents, channels = dims[:rank], dims[rank]
    if channels < 1 or min(extents) < 1:
        raise FormatError(f"empty extents {extents} x {channels}")
    count = channels * int(np.prod(extents))
    if len(buf) != pos + 4 * count:
        raise FormatError(f"payload has {len(buf) - pos} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    return data.astype(np.float64).reshape((channels,) + tuple(extents))


def write_volume(volume, path) -> None:
    Path(path).write_bytes(encode_volume(volume))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


# --------------------------------------------------------------------------
# dataset manifest
# --------------------------------------------------------------------------
MANIFEST_FIELDS = ("subject_id", "x1", "x2", "y", "roi", "stage")


def write_subject(s: Subject, out_dir) -> dict[str, str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    row = {"subject_id": s.subject_id, "stage": s.stage_label}
    for key, vol in (("x1", s.x1), ("x2", s.x2), ("y", s.y), ("roi", s.roi_mask[None])):
        name = f"{s.subject_id}_{key}.dvol"
        write_volume(vol, out_dir / name)
        row[key] = name
    return row


def write_manifest(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in MANIFEST_FIELDS})


def read_manifest(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if rows and set(MANIFEST_FIELDS) - set(rows[0]):
        raise FormatError(f"manifest {path} lacks columns {set(MANIFEST_FIELDS) - set(rows[0])}")
    return rows


def load_subject(row: dict[str, str], base_dir) -> Subject:
    base = Path(base_dir)
    vols = {}
    for key in ("x1", "x2", "y", "roi"):
        p = base / row[key]
        if not p.exists():
            raise FileNotFoundError(f"missing volume {p}")
        vols[key] = read_volume(p)
    return Subject(vols["x1"], vols["x2"], vols["y"], np.rint(vols["roi"][0]).astype(np.int64),
                   row["stage"], row["subject_id"])


def load_manifest(path) -> list[Subject]:
    path = Path(path)
    return [load_subject(row, path.parent) for row in read_manifest(path)]
