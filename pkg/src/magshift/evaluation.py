"""Discrimination and calibration metrics, per fold and aggregated across folds."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

__all__ = [
    "ScoredSet",
    "Confusion",
    "MetricsReport",
    "confusion_metrics",
    "auc",
    "roc_curve",
    "brier",
    "calibration_curve",
    "evaluate",
    "aggregate_report",
    "pool",
    "write_records",
    "report_records",
    "write_roc",
    "write_calibration",
    "SCALAR_METRICS",
]

SCALAR_METRICS = ("f1", "auc", "accuracy", "sensitivity", "specificity", "brier")


@dataclass(frozen=True)
class ScoredSet:
    y_true: np.ndarray
    y_prob: np.ndarray
    fold: str = ""
    method: str = ""

    def __post_init__(self):
        y = np.asarray(self.y_true, dtype=np.int64).ravel()
        p = np.asarray(self.y_prob, dtype=np.float64).ravel()
        if y.shape != p.shape:
            raise ValueError(f"y_true has {y.size} entries, y_prob has {p.size}")
        if y.size and not np.isin(y, (0, 1)).all():
            raise ValueError("y_true must be binary")
        if p.size and (np.isnan(p).any() or p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("y_prob must lie in [0, 1]")
        object.__setattr__(self, "y_true", y)
        object.__setattr__(self, "y_prob", p)


def pool(sets: Sequence[ScoredSet], method: str = "") -> ScoredSet:
    """Concatenate scored sets, e.g. the test predictions of every fold."""
    return ScoredSet(
        np.concatenate([s.y_true for s in sets]) if sets else np.zeros(0, dtype=np.int64),
        np.concatenate([s.y_prob for s in sets]) if sets else np.zeros(0),
        fold="pooled",
        method=method or (sets[0].method if sets else ""),
    )


class Confusion(NamedTuple):
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float


def _require_both(s: ScoredSet, metric: str) -> tuple[int, int]:
    n_pos = int(s.y_true.sum())
    n_neg = s.y_true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(metric)
    return n_pos, n_neg


def confusion_metrics(s: ScoredSet, threshold: float = 0.5) -> Confusion:
    """Threshold metrics with malignant (1) as the positive class; ``p >= threshold`` is positive."""
    _require_both(s, "sensitivity/specificity")
    pred = s.y_prob >= threshold
    pos = s.y_true == 1
    tp = int(np.sum(pred & pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    return Confusion(
        accuracy=(tp + tn) / (tp + tn + fp + fn),
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
        f1=2 * tp / (2 * tp + fp + fn),
    )


def auc(s: ScoredSet) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    n_pos, n_neg = _require_both(s, "auc")
    ranks = rankdata(s.y_prob)  # average ranks handle ties
    u = ranks[s.y_true == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(s: ScoredSet) -> list[tuple[float, float]]:
    """Tie-aware ROC staircase from (0, 0) to (1, 1), one point per distinct score."""
    n_pos, n_neg = _require_both(s, "roc")
    order = np.argsort(-s.y_prob, kind="mergesort")
    p = s.y_prob[order]
    y = s.y_true[order]
    last = np.r_[np.flatnonzero(np.diff(p) != 0), p.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    pts = [(0.0, 0.0)]
    pts += [(fp / n_neg, tp / n_pos) for fp, tp in zip(fps.tolist(), tps.tolist())]
    return pts


def brier(s: ScoredSet) -> float:
    return float(np.mean((s.y_prob - s.y_true) ** 2))


def calibration_curve(s: ScoredSet, n_bins: int = 10) -> list[tuple[float, float, int]]:
    """Equal-width reliability bins on [0, 1]; the last bin is closed on the right.

    Returns ``(mean predicted prob, fraction positive, count)`` for non-empty bins.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, s.y_prob, side="right") - 1, 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        mask = idx == b
        n = int(mask.sum())
        if n:
            out.append((float(s.y_prob[mask].mean()), float(s.y_true[mask].mean()), n))
    return out


@dataclass
class MetricsReport:
    f1: float
    auc: float
    accuracy: float
    sensitivity: float
    specificity: float
    brier: float
    roc_points: list[tuple[float, float]] = field(default_factory=list)
    calibration_bins: list[tuple[float, float, int]] = field(default_factory=list)
    signature_size: float | None = None

    def scalars(self) -> dict[str, float]:
        out = {k: getattr(self, k) for k in SCALAR_METRICS}
        if self.signature_size is not None:
            out["signature_size"] = self.signature_size
        return out


def evaluate(s: ScoredSet, threshold: float = 0.5, n_bins: int = 10) -> MetricsReport:
    c = confusion_metrics(s, threshold)
    return MetricsReport(
        f1=c.f1,
        auc=auc(s),
        accuracy=c.accuracy,
        sensitivity=c.sensitivity,
        specificity=c.specificity,
        brier=brier(s),
        roc_points=roc_curve(s),
        calibration_bins=calibration_curve(s, n_bins),
    )


def aggregate_report(per_fold: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted mean of every scalar across folds; curve fields are dropped."""
    if not per_fold:
        raise ValueError("aggregate_report needs at least one report")
    means = {k: float(np.mean([getattr(r, k) for r in per_fold])) for k in SCALAR_METRICS}
    sizes = [r.signature_size for r in per_fold]
    size = float(np.mean(sizes)) if all(x is not None for x in sizes) else None
    return MetricsReport(**means, signature_size=size)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_records(path, records) -> None:
    """Write ``(method, fold, metric, value)`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "fold", "metric", "value"])
        for method, fold, metric, value in records:
            w.writerow([method, fold, metric, _fmt(value)])


def report_records(report: MetricsReport, method: str, fold: str) -> list[tuple]:
    return [(method, fold, k, v) for k, v in report.scalars().items()]


def write_roc(path, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        w.writerows([_fmt(a), _fmt(b)] for a, b in points)


def write_calibration(path, bins) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_mean_prob", "bin_frac_positive", "count"])
        w.writerows([_fmt(a), _fmt(b), c] for a, b, c in bins)
