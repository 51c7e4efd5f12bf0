"""Confusion-based metrics, Cohen's kappa, ROC/AUC and fold aggregation.

Undefined ratios (zero denominators) are returned as ``None`` and rendered as
``NOT_DEFINED`` in reports; they are never coerced to 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import InputError

NOT_DEFINED = "NOT_DEFINED"
METRIC_NAMES = ("accuracy", "kappa", "sensitivity", "specificity", "precision")
_BOUNDS = {"kappa": (-1.0, 1.0)}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InputError(f"negative count in {self}")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass(frozen=True)
class BinaryMetrics:
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    kappa: Optional[float]

    def get(self, name: str) -> Optional[float]:
        return getattr(self, name)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Count outcomes with a positive call at ``score >= threshold``."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InputError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise InputError("confusion needs at least one item")
    y = y.astype(bool)
    pred = s >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & y)),
        fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)),
        fn=int(np.sum(~pred & y)),
    )


def _ratio(num: int, den: int) -> Optional[Fraction]:
    return Fraction(num, den) if den else None


def _to_float(x: Optional[Fraction]) -> Optional[float]:
    return None if x is None else float(x)


def kappa_from_counts(c: ConfusionCounts) -> Optional[float]:
    n = c.n
    p_o = Fraction(c.tp + c.tn, n)
    p_e = Fraction((c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn), n * n)
    if p_e == 1:
        return None
    return float((p_o - p_e) / (1 - p_e))


def binary_metrics(c: ConfusionCounts) -> BinaryMetrics:
    if c.n == 0:
        raise InputError("binary_metrics needs at least one evaluated item")
    return BinaryMetrics(
        accuracy=float(Fraction(c.tp + c.tn, c.n)),
        sensitivity=_to_float(_ratio(c.tp, c.tp + c.fn)),
        specificity=_to_float(_ratio(c.tn, c.tn + c.fp)),
        precision=_to_float(_ratio(c.tp, c.tp + c.fp)),
        kappa=kappa_from_counts(c),
    )


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[0] is +inf (nothing called positive)
    auc: float

    @property
    def points(self) -> list:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            fh.write("fpr,tpr,threshold\n")
            for f, t, th in zip(self.fpr, self.tpr, self.thresholds):
                fh.write(f"{float(f)!r},{float(t)!r},{float(th)!r}\n")
        return path

    @classmethod
    def read_csv(cls, path) -> "RocCurve":
        data = np.genfromtxt(path, delimiter=",", names=True)
        data = np.atleast_1d(data)
        fpr, tpr = data["fpr"], data["tpr"]
        return cls(fpr=fpr, tpr=tpr, thresholds=data["threshold"], auc=float(np.trapezoid(tpr, fpr)))


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve over the distinct score values, with trapezoidal AUC.

    Tied scores form one step, so the trapezoid over a tie block gives the
    half credit that the Mann-Whitney statistic assigns to tied pairs.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise InputError(f"length mismatch: {s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("roc_auc needs both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each block of equal scores
    distinct = np.where(np.diff(s_sorted))[0]
    ends = np.r_[distinct, y_sorted.size - 1]
    tps = np.cumsum(y_sorted)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    thresholds = np.r_[np.inf, s_sorted[ends]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class Estimate:
    point: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]


def aggregate_folds(values: Sequence[float], confidence: float = 0.95, bounds=None) -> Estimate:
    """Mean with a Student-t interval over fold-level estimates.

    ``bounds`` optionally clips the interval to the metric's valid range.
    """
    v = np.asarray([x for x in values], dtype=np.float64)
    if v.size < 2:
        raise InputError(f"aggregate_folds needs at least 2 values, got {v.size}")
    mean = float(np.mean(v))
    sd = float(np.std(v, ddof=1))
    half = float(stats.t.ppf(0.5 + confidence / 2.0, v.size - 1)) * sd / math.sqrt(v.size)
    lo, hi = mean - half, mean + half
    if bounds is not None:
        lo, hi = max(lo, bounds[0]), min(hi, bounds[1])
    return Estimate(mean, lo, hi)


def wilson_interval(successes: int, n: int, confidence: float = 0.95):
    if n == 0:
        return None, None
    z = float(stats.norm.ppf(0.5 + confidence / 2.0))
    p = successes / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


def _proportion_parts(c: ConfusionCounts, name: str):
    return {
        "accuracy": (c.tp + c.tn, c.n),
        "sensitivity": (c.tp, c.tp + c.fn),
        "specificity": (c.tn, c.tn + c.fp),
        "precision": (c.tp, c.tp + c.fp),
    }[name]


def _kappa_interval(c: ConfusionCounts, confidence: float):
    k = kappa_from_counts(c)
    if k is None:
        return None, None, None
    n = c.n
    p_o = (c.tp + c.tn) / n
    p_e = ((c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)) / (n * n)
    se = math.sqrt(p_o * (1 - p_o) / (n * (1 - p_e) ** 2))
    z = float(stats.norm.ppf(0.5 + confidence / 2.0))
    return k, max(-1.0, k - z * se), min(1.0, k + z * se)


@dataclass
class MetricsReport:
    """Fold-aggregated performance in the layout of a Table-2 column."""

    accuracy: Estimate
    kappa: Estimate
    sensitivity: Estimate
    specificity: Estimate
    precision: Estimate
    n_folds: int
    per_fold: list = field(default_factory=list)  # list of BinaryMetrics
    per_fold_counts: list = field(default_factory=list)  # list of ConfusionCounts
    auc: Optional[Estimate] = None
    per_fold_auc: list = field(default_factory=list)
    aggregate: str = "fold_mean"
    wilson: dict = field(default_factory=dict)  # metric -> per-fold (lo, hi)
    label: str = "model"

    def estimate(self, name: str) -> Estimate:
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = {
            "label": self.label,
            "aggregate": self.aggregate,
            "n_folds": self.n_folds,
            "metrics": {m: asdict(self.estimate(m)) for m in METRIC_NAMES},
            "per_fold": [asdict(m) for m in self.per_fold],
            "per_fold_counts": [asdict(c) for c in self.per_fold_counts],
            "auc": None if self.auc is None else asdict(self.auc),
            "per_fold_auc": list(self.per_fold_auc),
            "wilson": {k: [list(p) for p in v] for k, v in self.wilson.items()},
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            **{m: Estimate(**d["metrics"][m]) for m in METRIC_NAMES},
            n_folds=d["n_folds"],
            per_fold=[BinaryMetrics(**m) for m in d["per_fold"]],
            per_fold_counts=[ConfusionCounts(**c) for c in d["per_fold_counts"]],
            auc=None if d.get("auc") is None else Estimate(**d["auc"]),
            per_fold_auc=list(d.get("per_fold_auc", [])),
            aggregate=d.get("aggregate", "fold_mean"),
            wilson={k: [tuple(p) for p in v] for k, v in d.get("wilson", {}).items()},
            label=d.get("label", "model"),
        )

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def read_json(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_report(
    fold_counts: Sequence[ConfusionCounts],
    fold_aucs: Optional[Sequence[float]] = None,
    aggregate: str = "fold_mean",
    confidence: float = 0.95,
    label: str = "model",
) -> MetricsReport:
    """Aggregate per-fold confusion counts into a :class:`MetricsReport`.

    ``fold_mean`` averages fold-level metrics with a t-interval; ``pooled``
    computes each metric on the summed counts, with Wilson intervals for the
    proportions and an asymptotic interval for kappa.
    """
    if aggregate not in ("fold_mean", "pooled"):
        raise InputError(f"unknown aggregate mode {aggregate!r}")
    per_fold = [binary_metrics(c) for c in fold_counts]
    estimates = {}
    if aggregate == "fold_mean":
        for name in METRIC_NAMES:
            vals = [m.get(name) for m in per_fold if m.get(name) is not None]
            if len(vals) >= 2:
                estimates[name] = aggregate_folds(vals, confidence, _BOUNDS.get(name, (0.0, 1.0)))
            elif len(vals) == 1:
                estimates[name] = Estimate(vals[0], None, None)
            else:
                estimates[name] = Estimate(None, None, None)
    else:
        pooled = ConfusionCounts(0, 0, 0, 0)
        for c in fold_counts:
            pooled = pooled + c
        for name in METRIC_NAMES:
            if name == "kappa":
                estimates[name] = Estimate(*_kappa_interval(pooled, confidence))
                continue
            num, den = _proportion_parts(pooled, name)
            if den == 0:
                estimates[name] = Estimate(None, None, None)
            else:
                estimates[name] = Estimate(num / den, *wilson_interval(num, den, confidence))
    wilson = {}
    for name in ("accuracy", "sensitivity", "specificity", "precision"):
        wilson[name] = [wilson_interval(*_proportion_parts(c, name), confidence) for c in fold_counts]
    auc = None
    # one entry per fold; None where a fold lacks a class
    aucs = list(fold_aucs) if fold_aucs is not None else []
    defined = [a for a in aucs if a is not None]
    if len(defined) >= 2:
        auc = aggregate_folds(defined, confidence, (0.0, 1.0))
    elif len(defined) == 1:
        auc = Estimate(defined[0], None, None)
    return MetricsReport(
        **estimates,
        n_folds=len(fold_counts),
        per_fold=per_fold,
        per_fold_counts=list(fold_counts),
        auc=auc,
        per_fold_auc=aucs,
        aggregate=aggregate,
        wilson=wilson,
        label=label,
    )


@dataclass(frozen=True)
class SpecialistPoint:
    sensitivity: Optional[float]
    specificity: Optional[float]
    counts: ConfusionCounts
    metrics: BinaryMetrics

    @property
    def fpr(self) -> Optional[float]:
        return None if self.specificity is None else 1.0 - self.specificity


def specialist_point(specialist_labels, gold_labels) -> SpecialistPoint:
    """Pooled specialist gradings scored as hard predictions against gold."""
    spec = np.asarray(specialist_labels).ravel()
    gold = np.asarray(gold_labels).ravel()
    if spec.size == 0:
        raise InputError("no specialist-graded records")
    c = confusion(spec.astype(float), gold, threshold=0.5)
    m = binary_metrics(c)
    return SpecialistPoint(m.sensitivity, m.specificity, c, m)


def format_value(x: Optional[float], digits: int = 3) -> str:
    return NOT_DEFINED if x is None else f"{x:.{digits}f}"


def write_table2(path, reports: Sequence[MetricsReport], digits: int = 3) -> Path:
    """One row per metric, one (point, ci_low, ci_high) triple per report."""
    path = Path(path)
    header = ["metric"]
    for r in reports:
        header += [f"{r.label}_point", f"{r.label}_ci_low", f"{r.label}_ci_high"]
    lines = [",".join(header)]
    names = list(METRIC_NAMES) + (["auc"] if any(r.auc is not None for r in reports) else [])
    for name in names:
        row = [name]
        for r in reports:
            e = r.auc if name == "auc" else r.estimate(name)
            if e is None:
                e = Estimate(None, None, None)
            row += [format_value(e.point, digits), format_value(e.ci_low, digits),
                    format_value(e.ci_high, digits)]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_per_fold(path, report: MetricsReport) -> Path:
    path = Path(path)
    cols = ["fold", "tp", "fp", "tn", "fn", *METRIC_NAMES, "auc"]
    lines = [",".join(cols)]
    for i, (c, m) in enumerate(zip(report.per_fold_counts, report.per_fold)):
        auc = report.per_fold_auc[i] if i < len(report.per_fold_auc) else None
        vals = [str(i), str(c.tp), str(c.fp), str(c.tn), str(c.fn)]
        vals += [format_value(m.get(n), 6) for n in METRIC_NAMES]
        vals.append(format_value(auc, 6))
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")
    return path
