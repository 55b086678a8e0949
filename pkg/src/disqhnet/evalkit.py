"""Evaluation: voxelwise metrics, high-uptake masks, SUVR, staging and agreement."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import NormalizationError, ShapeError

STAGES = ("CN", "I/II", "III/IV", "V/VI")
BRAAK_ROIS = ("I/II", "III/IV", "V/VI")
ROI_LABELS = {"I/II": 1, "III/IV": 2, "V/VI": 3, "reference": 4}
STAGE_THRESHOLDS = {"I/II": 1.1, "III/IV": 1.2, "V/VI": 1.3}
SOFT_WEIGHTS = (1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0)
PSNR_CAP = 99.0
HIGH_UPTAKE_THRESHOLD = 1.3
SSIM_K1, SSIM_K2 = 0.01, 0.03


def stage_rank(stage: str) -> int:
    try:
        return STAGES.index(stage)
    except ValueError:
        raise ValueError(f"unknown stage {stage!r}") from None


def _pair(y_hat, y) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


# --------------------------------------------------------------------------
# voxelwise metrics
# --------------------------------------------------------------------------
def mae(y_hat, y) -> float:
    a, b = _pair(y_hat, y)
    return float(np.abs(a - b).mean())


def mse(y_hat, y) -> float:
    a, b = _pair(y_hat, y)
    return float(((a - b) ** 2).mean())


def psnr(y_hat, y, peak: Optional[float] = None) -> float:
    """``10 log10(peak^2 / MSE)``, peak defaulting to the reference maximum; capped at 99 dB."""
    a, b = _pair(y_hat, y)
    err = mse(a, b)
    peak = float(b.max()) if peak is None else float(peak)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(peak * peak / err)))


def _spatial(v: np.ndarray) -> np.ndarray:
    return v[0] if v.ndim == 4 and v.shape[0] == 1 else v


def _gauss(v: np.ndarray, size: int, sigma: float) -> np.ndarray:
    truncate = (size // 2) / sigma
    return ndimage.gaussian_filter(v, sigma, truncate=truncate, mode="reflect")


def _ssim_parts(a: np.ndarray, b: np.ndarray, data_range: float, size: int, sigma: float):
    C1, C2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    if min(a.shape) < size:
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
    else:
        mu_a, mu_b = _gauss(a, size, sigma), _gauss(b, size, sigma)
        va = _gauss(a * a, size, sigma) - mu_a ** 2
        vb = _gauss(b * b, size, sigma) - mu_b ** 2
        cov = _gauss(a * b, size, sigma) - mu_a * mu_b
        pad = size // 2
        inner = tuple(slice(pad, n - pad) for n in a.shape)
        mu_a, mu_b, va, vb, cov = (x[inner] for x in (mu_a, mu_b, va, vb, cov))
    lum = (2 * mu_a * mu_b + C1) / (mu_a ** 2 + mu_b ** 2 + C1)
    cs = (2 * cov + C2) / (va + vb + C2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ssim(y_hat, y, window: int = 7, sigma: float = 1.5, data_range: Optional[float] = None) -> float:
    """Gaussian-window 3D SSIM over interior voxels.

    ``data_range`` defaults to the larger of the two volumes' ranges so the
    score is symmetric in its arguments. Volumes smaller than the window
    fall back to a single global window.
    """
    a, b = (_spatial(v) for v in _pair(y_hat, y))
    if data_range is None:
        data_range = max(np.ptp(a), np.ptp(b)) or 1.0
    return _ssim_parts(a, b, data_range, window, sigma)[0]


def _halve(v: np.ndarray) -> np.ndarray:
    from .ndgrad import Tensor, no_grad, trilinear_resize
    with no_grad():
        return trilinear_resize(Tensor(v[None]), tuple(-(-n // 2) for n in v.shape)).data[0]


MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def ms_ssim(y_hat, y, window: int = 7, sigma: float = 1.5, scales: int = 3,
            data_range: Optional[float] = None) -> float:
    """Multi-scale SSIM over ``min(scales, feasible)`` trilinear halvings.

    Contrast-structure terms at coarse scales and the full SSIM at the last
    scale are combined with renormalized standard weights. Negative
    components are clipped to zero before exponentiation.
    """
    a, b = (_spatial(v) for v in _pair(y_hat, y))
    if data_range is None:
        data_range = max(np.ptp(a), np.ptp(b)) or 1.0
    n = 1
    while n < scales and min(a.shape) // 2 ** n >= 2:
        n += 1
    w = np.array(MS_SSIM_WEIGHTS[:n])
    w = w / w.sum()
    vals = []
    for i in range(n):
        full, cs = _ssim_parts(a, b, data_range, window, sigma)
        vals.append(full if i == n - 1 else cs)
        if i < n - 1:
            a, b = _halve(a), _halve(b)
    return float(np.prod(np.maximum(vals, 0.0) ** w))


# --------------------------------------------------------------------------
# SUVR and high-uptake masks
# --------------------------------------------------------------------------
def suvr(volume, reference_mask) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    ref = np.asarray(reference_mask, dtype=bool)
    if ref.shape != v.shape[-ref.ndim:]:
        raise ShapeError("reference mask does not match the volume")
    if not ref.any():
        raise NormalizationError("empty reference region")
    m = float(v[..., ref].mean())
    if not m > 0:
        raise NormalizationError(f"reference mean {m} is not positive")
    return v / m


@dataclass
class MaskMetrics:
    dice: float
    sensitivity: Optional[float]
    specificity: Optional[float]


def high_uptake_metrics(y_hat, y, threshold: float = HIGH_UPTAKE_THRESHOLD) -> MaskMetrics:
    """Dice, sensitivity and specificity of ``> threshold`` masks (inputs are SUVR volumes)."""
    a, b = _pair(y_hat, y)
    pred, ref = a > threshold, b > threshold
    tp = int((pred & ref).sum())
    fp = int((pred & ~ref).sum())
    fn = int((~pred & ref).sum())
    tn = int((~pred & ~ref).sum())
    total = pred.sum() + ref.sum()
    dice = 2.0 * tp / total if total else 1.0
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return MaskMetrics(float(dice), sens, spec)


# --------------------------------------------------------------------------
# regional statistics and staging
# --------------------------------------------------------------------------
@dataclass
class RoiStats:
    """Mean SUVR per Braak ROI (non-empty ROIs only)."""

    means: dict[str, float]

    def __getitem__(self, roi: str) -> float:
        return self.means[roi]

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(self.means.get(r, float("nan")) for r in BRAAK_ROIS)


def roi_means(suvr_volume, mask) -> RoiStats:
    v = _spatial(np.asarray(suvr_volume, dtype=np.float64))
    mask = np.asarray(mask)
    out = {}
    for name in BRAAK_ROIS:
        region = mask == ROI_LABELS[name]
        if region.any():
            out[name] = float(v[region].mean())
    return RoiStats(out)


def braak_stage(means) -> str:
    """V/VI if its ROI mean > 1.3, else III/IV if > 1.2, else I/II if > 1.1, else CN.

    ``means`` is a RoiStats, a mapping by ROI name, or a sequence ordered
    (I/II, III/IV, V/VI). Missing ROIs never trigger their stage.
    """
    if isinstance(means, RoiStats):
        m = means.means
    elif isinstance(means, Mapping):
        m = dict(means)
    else:
        m = dict(zip(BRAAK_ROIS, means))
    for name in ("V/VI", "III/IV", "I/II"):
        if m.get(name, -math.inf) > STAGE_THRESHOLDS[name]:
            return name
    return "CN"


@dataclass
class StagingAccuracy:
    hard: float
    soft: float
    cn_ad: float


def staging_accuracies(pred_stages: Sequence[str], true_stages: Sequence[str]) -> StagingAccuracy:
    """Exact, distance-weighted and CN-vs-AD accuracy (AD is any stage >= I/II)."""
    if len(pred_stages) != len(true_stages) or not pred_stages:
        raise ValueError("need equally many, and at least one, predicted and true stages")
    p = np.array([stage_rank(s) for s in pred_stages])
    t = np.array([stage_rank(s) for s in true_stages])
    dist = np.abs(p - t)
    soft = np.array(SOFT_WEIGHTS)[dist]
    return StagingAccuracy(float((dist == 0).mean()), float(soft.mean()), float(((p > 0) == (t > 0)).mean()))


# --------------------------------------------------------------------------
# agreement statistics
# --------------------------------------------------------------------------
@dataclass
class BlandAltman:
    bias_pct: float
    loa_low: float
    loa_high: float
    points: list[tuple[float, float]]  # (mean of pair, percent error)
    std: float = 0.0


def percent_errors(pred, ref) -> np.ndarray:
    p, r = (np.asarray(x, dtype=np.float64).ravel() for x in (pred, ref))
    if p.shape != r.shape:
        raise ShapeError("prediction and reference counts differ")
    if np.any(r <= 0):
        raise NormalizationError("reference means must be positive")
    return (p - r) / r * 100.0


def bland_altman(pred_means, ref_means) -> BlandAltman:
    """Pooled percent-error bias with ``bias +/- 1.96 sd`` limits (population sd)."""
    p, r = (np.asarray(x, dtype=np.float64).ravel() for x in (pred_means, ref_means))
    err = percent_errors(p, r)
    if err.size == 0:
        raise ValueError("no pairs")
    bias = float(err.mean())
    sd = float(err.std())
    pts = [(float(a), float(e)) for a, e in zip((p + r) / 2.0, err)]
    return BlandAltman(bias, bias - 1.96 * sd, bias + 1.96 * sd, pts, sd)


def loa_std(loa_low: float, loa_high: float) -> float:
    """Standard deviation implied by published limits of agreement."""
    return (loa_high - loa_low) / (2 * 1.96)


def pearson(a, b) -> Optional[float]:
    """Pearson r; ``None`` with fewer than 3 pairs or zero variance."""
    x, y = (np.asarray(v, dtype=np.float64).ravel() for v in (a, b))
    if x.size != y.size:
        raise ShapeError("unequal sample sizes")
    if x.size < 3:
        return None
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0:
        return None
    return float((xc * yc).sum() / den)


def roi_pearson(pred_by_subject: Sequence[RoiStats], ref_by_subject: Sequence[RoiStats], roi: str) -> Optional[float]:
    pairs = [(p.means[roi], r.means[roi]) for p, r in zip(pred_by_subject, ref_by_subject)
             if roi in p.means and roi in r.means]
    if not pairs:
        return None
    a, b = zip(*pairs)
    return pearson(a, b)


def relative_suvr_error(pred: Sequence[RoiStats], ref: Sequence[RoiStats]) -> float:
    """Mean absolute percent difference over all (subject, ROI) pairs."""
    errs = []
    for p, r in zip(pred, ref):
        for roi in BRAAK_ROIS:
            if roi in p.means and roi in r.means:
                errs.append(abs(percent_errors([p.means[roi]], [r.means[roi]])[0]))
    if not errs:
        raise ValueError("no ROI pairs to compare")
    return float(np.mean(errs))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------
SUBJECT_COLUMNS = ("subject_id", "mae", "mse", "psnr", "ssim", "ms_ssim", "dice", "sensitivity",
                   "specificity", "err_I/II", "err_III/IV", "err_V/VI", "stage_pred", "stage_true")


@dataclass
class SubjectRecord:
    subject_id: str
    mae: float
    mse: float
    psnr: float
    ssim: float
    ms_ssim: float
    dice: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    roi_pred: RoiStats
    roi_ref: RoiStats
    stage_pred: str
    stage_true: str

    def row(self) -> dict[str, object]:
        out = {k: getattr(self, k) for k in ("subject_id", "mae", "mse", "psnr", "ssim", "ms_ssim",
                                             "dice", "sensitivity", "specificity")}
        for roi in BRAAK_ROIS:
            p, r = self.roi_pred.means.get(roi), self.roi_ref.means.get(roi)
            out[f"err_{roi}"] = None if p is None or r is None else (p - r) / r * 100.0
        out["stage_pred"], out["stage_true"] = self.stage_pred, self.stage_true
        return out


def evaluate_subject(y_hat, y, roi_mask, subject_id: str = "", window: int = 7,
                     threshold: float = HIGH_UPTAKE_THRESHOLD) -> SubjectRecord:
    a, b = (_spatial(v) for v in _pair(y_hat, y))
    mask = np.asarray(roi_mask)
    ref = mask == ROI_LABELS["reference"]
    sa, sb = suvr(a, ref), suvr(b, ref)
    hu = high_uptake_metrics(sa, sb, threshold)
    rp, rr = roi_means(sa, mask), roi_means(sb, mask)
    return SubjectRecord(subject_id, mae(a, b), mse(a, b), psnr(a, b), ssim(a, b, window),
                         ms_ssim(a, b, window), hu.dice, hu.sensitivity, hu.specificity, rp, rr,
                         braak_stage(rp), braak_stage(rr))


def _mean_std(values) -> tuple[float, float]:
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


@dataclass
class EvalReport:
    records: list[SubjectRecord]
    threshold: float = HIGH_UPTAKE_THRESHOLD
    aggregates: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.aggregate()

    def aggregate(self) -> dict[str, object]:
        recs = self.records
        agg: dict[str, object] = {}
        for k in ("mae", "mse", "psnr", "ssim", "ms_ssim", "dice", "sensitivity", "specificity"):
            agg[k] = _mean_std(getattr(r, k) for r in recs)
        pred = [r.roi_pred.means.get(roi) for r in recs for roi in BRAAK_ROIS]
        ref = [r.roi_ref.means.get(roi) for r in recs for roi in BRAAK_ROIS]
        ba = bland_altman([p for p, q in zip(pred, ref) if p is not None and q is not None],
                          [q for p, q in zip(pred, ref) if p is not None and q is not None])
        agg["bland_altman"] = ba
        agg["relative_suvr_error"] = relative_suvr_error([r.roi_pred for r in recs], [r.roi_ref for r in recs])
        agg["staging"] = staging_accuracies([r.stage_pred for r in recs], [r.stage_true for r in recs])
        agg["pearson"] = {roi: roi_pearson([r.roi_pred for r in recs], [r.roi_ref for r in recs], roi)
                          for roi in BRAAK_ROIS}
        return agg

    def subject_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(SUBJECT_COLUMNS)
        for r in self.records:
            row = r.row()
            w.writerow([_fmt(row[c]) for c in SUBJECT_COLUMNS])
        return buf.getvalue()

    def bland_altman_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(("subject_id", "roi", "mean", "pct_error"))
        for r in self.records:
            for roi in BRAAK_ROIS:
                if roi in r.roi_pred.means and roi in r.roi_ref.means:
                    p, q = r.roi_pred.means[roi], r.roi_ref.means[roi]
                    w.writerow((r.subject_id, roi, _fmt((p + q) / 2.0), _fmt((p - q) / q * 100.0)))
        return buf.getvalue()

    def summary(self) -> str:
        a = self.aggregates
        lines = [f"# subjects\t{len(self.records)}", f"# high_uptake_threshold\t{self.threshold}"]
        for k in ("mae", "mse", "psnr", "ssim", "ms_ssim", "dice", "sensitivity", "specificity"):
            m, s = a[k]
            lines.append(f"{k}\t{_fmt(m)} +/- {_fmt(s)}")
        ba = a["bland_altman"]
        lines.append(f"bland_altman_bias_pct\t{_fmt(ba.bias_pct)}")
        lines.append(f"bland_altman_loa\t[{_fmt(ba.loa_low)}, {_fmt(ba.loa_high)}]")
        lines.append(f"relative_suvr_error_pct\t{_fmt(a['relative_suvr_error'])}")
        st = a["staging"]
        lines.append(f"staging_accuracy\thard {_fmt(st.hard)}\tsoft {_fmt(st.soft)}\tcn_ad {_fmt(st.cn_ad)}")
        for roi, r in a["pearson"].items():
            lines.append(f"pearson_{roi}\t{_fmt(r)}")
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, str):
        return x
    if isinstance(x, float) and math.isnan(x):
        return "NA"
    return f"{x:.6f}"
