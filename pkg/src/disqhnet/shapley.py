"""Exact Shapley attribution of reconstruction quality to the PID latents.

Players are the four latent partitions. The empty coalition is the
structure-only reconstruction: the decoder still sees the edge pyramid, but
every partition is replaced by its ablation value.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import edges, evalkit
from . import ndgrad as nd
from .errors import ConfigError, IncompleteGameError

PLAYER_NAMES = ("Redundant", "Unique_T1", "Unique_T2", "Complementary")
PLAYER_KEYS = {"Redundant": "r", "Unique_T1": "u1", "Unique_T2": "u2", "Complementary": "c"}
METRICS = ("neg_mae", "psnr", "ssim")
ABLATIONS = ("mean-code", "zeros", "codebook-centroid")
TABLE_ROWS = (("Structure", ()), ("+Redundant", ("Redundant",)), ("+Unique_T1", ("Unique_T1",)),
              ("+Unique_T2", ("Unique_T2",)), ("+Complementary", ("Complementary",)),
              ("Full", PLAYER_NAMES))


def all_coalitions(players: Sequence[str] = PLAYER_NAMES) -> list[frozenset]:
    return [frozenset(c) for r in range(len(players) + 1) for c in itertools.combinations(players, r)]


def coalition_name(coalition: Iterable[str]) -> str:
    members = [p for p in PLAYER_NAMES if p in set(coalition)]
    return "+".join(members) if members else "Structure"


@dataclass
class CoalitionGame:
    players: tuple[str, ...]
    values: dict[frozenset, float]

    @property
    def baseline(self) -> float:
        return self.value(frozenset())

    def value(self, coalition) -> float:
        key = frozenset(coalition)
        if key not in self.values:
            raise IncompleteGameError(f"no value for coalition {sorted(key)}")
        return self.values[key]

    @classmethod
    def from_function(cls, players: Sequence[str], fn: Callable[[frozenset], float]) -> "CoalitionGame":
        return cls(tuple(players), {c: float(fn(c)) for c in all_coalitions(players)})


def shapley_values(game: CoalitionGame) -> dict[str, float]:
    """``phi_i = sum_{S not containing i} |S|!(n-1-|S|)!/n! * (v(S+i) - v(S))``."""
    n = len(game.players)
    phi = {}
    for i in game.players:
        others = [p for p in game.players if p != i]
        total = 0.0
        for k in range(n):
            w = math.factorial(k) * math.factorial(n - 1 - k) / math.factorial(n)
            for S in itertools.combinations(others, k):
                S = frozenset(S)
                total += w * (game.value(S | {i}) - game.value(S))
        phi[i] = total
    return phi


@dataclass
class Attribution:
    """Per-player Shapley values for each metric of one subject."""

    subject_id: str
    values: dict[str, dict[str, float]]  # metric -> player -> phi
    coalition_metrics: dict[frozenset, dict[str, float]] = field(default_factory=dict)

    def efficiency_gap(self, metric: str) -> float:
        full = self.coalition_metrics[frozenset(PLAYER_NAMES)][metric]
        base = self.coalition_metrics[frozenset()][metric]
        return abs(sum(self.values[metric].values()) - (full - base))


# --------------------------------------------------------------------------
# model-side coalition evaluation
# --------------------------------------------------------------------------
def ablation_values(model, subjects: Sequence, kind: str = "mean-code") -> dict[str, np.ndarray]:
    """Replacement code maps for absent players.

    ``mean-code`` averages each partition's quantized map over the cohort;
    ``zeros`` uses zero maps; ``codebook-centroid`` broadcasts the mean row of
    the partition's codebook slice.
    """
    if kind not in ABLATIONS:
        raise ConfigError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")
    if not subjects:
        raise ValueError("need at least one subject")
    sums: dict[str, np.ndarray] = {}
    with nd.no_grad():
        for s in subjects:
            out = model.forward(s.x1, s.x2, mode="infer", track_usage=False)
            for k, v in out.codes.items():
                sums[k] = sums.get(k, 0.0) + v.data
    if kind == "mean-code":
        return {k: v / len(subjects) for k, v in sums.items()}
    if kind == "zeros":
        return {k: np.zeros_like(v) for k, v in sums.items()}
    out = {}
    for k, v in sums.items():
        cb, rows = model.book_for(k)
        centroid = (cb.embeddings if rows is None else cb.embeddings[rows]).mean(axis=0)
        out[k] = np.broadcast_to(centroid[:, None, None, None], v.shape).copy()
    return out


def coalition_forward(model, subject, coalition: Iterable[str], ablation: Mapping[str, np.ndarray],
                      pyramid: Optional[edges.EdgePyramid] = None) -> np.ndarray:
    """Inference output with partitions outside ``coalition`` replaced by ablation values."""
    members = set(coalition)
    unknown = members - set(PLAYER_NAMES)
    if unknown:
        raise ConfigError(f"unknown players {sorted(unknown)}")
    replace = {PLAYER_KEYS[p]: ablation[PLAYER_KEYS[p]] for p in PLAYER_NAMES if p not in members}
    with nd.no_grad():
        out = model.forward(subject.x1, subject.x2, mode="infer", ablate=replace, pyramid=pyramid,
                            track_usage=False)
    return out.y_hat.data


def coalition_scores(y_hat, y, window: int = 7) -> dict[str, float]:
    return {
        "neg_mae": -evalkit.mae(y_hat, y),
        "mae": evalkit.mae(y_hat, y),
        "mse": evalkit.mse(y_hat, y),
        "psnr": evalkit.psnr(y_hat, y),
        "ssim": evalkit.ssim(y_hat, y, window),
        "ms_ssim": evalkit.ms_ssim(y_hat, y, window),
    }


def attribute_subject(model, subject, ablation: Mapping[str, np.ndarray], window: int = 7) -> Attribution:
    pyramid = edges.edge_pyramid(subject.x1, model.cfg.pyramid_depth)
    metrics = {}
    for coalition in all_coalitions():
        y_hat = coalition_forward(model, subject, coalition, ablation, pyramid)
        metrics[coalition] = coalition_scores(y_hat, subject.y, window)
    values = {m: shapley_values(CoalitionGame(PLAYER_NAMES, {c: v[m] for c, v in metrics.items()}))
              for m in METRICS}
    return Attribution(subject.subject_id, values, metrics)


@dataclass
class CoalitionRow:
    name: str
    per_subject: dict[str, list[float]]

    def mean_std(self, metric: str) -> tuple[float, float]:
        v = np.array(self.per_subject[metric])
        return float(v.mean()), float(v.std())


def coalition_table(attributions: Sequence[Attribution]) -> list[CoalitionRow]:
    """Mean and std per coalition row, recomputable from the per-subject values."""
    rows = []
    for name, members in TABLE_ROWS:
        key = frozenset(members)
        per = {m: [a.coalition_metrics[key][m] for a in attributions]
               for m in ("mse", "mae", "psnr", "ssim", "ms_ssim")}
        rows.append(CoalitionRow(name, per))
    return rows


# --------------------------------------------------------------------------
# tabular outputs
# --------------------------------------------------------------------------
def _num(x: float) -> str:
    return repr(float(x))


def attribution_tsv(attributions: Sequence[Attribution]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(("subject_id", "player", "metric", "shapley"))
    for a in attributions:
        for m in METRICS:
            for p in PLAYER_NAMES:
                w.writerow((a.subject_id, p, m, _num(a.values[m][p])))
    return buf.getvalue()


def coalitions_tsv(attributions: Sequence[Attribution]) -> str:
    cols = ("neg_mae", "mae", "mse", "psnr", "ssim", "ms_ssim")
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(("subject_id", "coalition") + cols)
    for a in attributions:
        for c in all_coalitions():
            w.writerow((a.subject_id, coalition_name(c)) + tuple(_num(a.coalition_metrics[c][k]) for k in cols))
    return buf.getvalue()


def violin_tsv(attributions: Sequence[Attribution]) -> str:
    """One column per (metric, player) holding per-subject values, for distribution plots."""
    header = [f"{m}:{p}" for m in METRICS for p in PLAYER_NAMES]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["subject_id"] + header)
    for a in attributions:
        w.writerow([a.subject_id] + [_num(a.values[m][p]) for m in METRICS for p in PLAYER_NAMES])
    return buf.getvalue()


def table_tsv(rows: Sequence[CoalitionRow]) -> str:
    metrics = ("mse", "mae", "psnr", "ssim", "ms_ssim")
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["coalition"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
    for r in rows:
        w.writerow([r.name] + [_num(x) for m in metrics for x in r.mean_std(m)])
    return buf.getvalue()
