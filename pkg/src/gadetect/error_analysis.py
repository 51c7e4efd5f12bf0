"""False-negative stratification by lesion area and centrality."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import AreaCategory, Centrality, ImageRecord
from .errors import DataError, InputError
from .metrics import NOT_DEFINED

AREA_LABELS = {
    AreaCategory.QUESTIONABLE: "Questionable",
    AreaCategory.LT_I2: "Definite, area < circle I-2",
    AreaCategory.I2_TO_O2: "Area >= I-2 but < O-2",
    AreaCategory.O2_TO_HALF_DA: "Area >= O-2 but < 1/2 DA",
    AreaCategory.HALF_TO_1_DA: "Area >= 1/2 DA but < 1 DA",
    AreaCategory.ONE_TO_2_DA: "Area >= 1 DA but < 2 DA",
    AreaCategory.GE_2_DA: "Area >= 2 DA",
}
CENTRAL_ORDER = (Centrality.DEFINITE_CENTER_POINT, Centrality.QUESTIONABLE_CP_DEFINITE_SUBFIELD)


@dataclass(frozen=True)
class ErrorRow:
    category: str
    n_total: int
    n_false_negative: int

    def __post_init__(self):
        if not 0 <= self.n_false_negative <= self.n_total:
            raise DataError(f"invalid counts for {self.category}: {self.n_false_negative}/{self.n_total}")

    @property
    def fn_rate(self) -> Optional[Fraction]:
        if self.n_total == 0:
            return None
        return Fraction(self.n_false_negative, self.n_total)

    @property
    def rate_percent(self) -> Optional[Decimal]:
        """Rate in percent, rounded half-up to one decimal from exact counts."""
        r = self.fn_rate
        if r is None:
            return None
        exact = Decimal(r.numerator * 100) / Decimal(r.denominator)
        return exact.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


@dataclass
class ErrorTable:
    task: str  # "area" or "centrality"
    rows: list = field(default_factory=list)

    def row(self, category: str) -> ErrorRow:
        for r in self.rows:
            if r.category == category:
                return r
        raise KeyError(category)

    @property
    def n_total(self) -> int:
        return sum(r.n_total for r in self.rows)

    @property
    def n_false_negative(self) -> int:
        return sum(r.n_false_negative for r in self.rows)

    def write_csv(self, path, labels: bool = False) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", "whole_test_set", "false_negatives", "rate_percent"])
            for r in self.rows:
                name = r.category
                if labels and self.task == "area":
                    name = AREA_LABELS[AreaCategory[name]]
                rate = r.rate_percent
                w.writerow([name, r.n_total, r.n_false_negative, NOT_DEFINED if rate is None else str(rate)])
        return path

    @classmethod
    def read_csv(cls, path, task: str) -> "ErrorTable":
        with open(path, newline="") as fh:
            rows = [
                ErrorRow(r["category"], int(r["whole_test_set"]), int(r["false_negatives"]))
                for r in csv.DictReader(fh)
            ]
        return cls(task=task, rows=rows)


def _as_bool_array(predictions, n: int) -> np.ndarray:
    p = np.asarray(predictions).ravel()
    if p.size != n:
        raise InputError(f"{p.size} predictions for {n} records")
    return p.astype(bool)


def fn_by_area(predictions: Sequence[bool], gold_records: Sequence[ImageRecord]) -> ErrorTable:
    """False negatives among gold GA-positives, one row per area category."""
    pred = _as_bool_array(predictions, len(gold_records))
    totals = {c: 0 for c in AreaCategory}
    misses = {c: 0 for c in AreaCategory}
    for p, rec in zip(pred, gold_records):
        if not rec.grade.ga_present:
            continue
        cat = rec.grade.area_category
        if cat is None:
            raise DataError(f"GA-positive record {rec.image_key} has no area_category")
        totals[cat] += 1
        if not p:
            misses[cat] += 1
    rows = [ErrorRow(c.name, totals[c], misses[c]) for c in AreaCategory]
    return ErrorTable(task="area", rows=rows)


def fn_by_centrality(predictions: Sequence[bool], gold_records: Sequence[ImageRecord]) -> ErrorTable:
    """False negatives among gold CGA-positives, split by center-point certainty."""
    pred = _as_bool_array(predictions, len(gold_records))
    totals = {c: 0 for c in CENTRAL_ORDER}
    misses = {c: 0 for c in CENTRAL_ORDER}
    for p, rec in zip(pred, gold_records):
        c = rec.grade.centrality
        if c not in totals:
            continue
        totals[c] += 1
        if not p:
            misses[c] += 1
    return ErrorTable(task="centrality", rows=[ErrorRow(c.name, totals[c], misses[c]) for c in CENTRAL_ORDER])


@dataclass(frozen=True)
class MonotonicityResult:
    ok: bool
    violation_index: Optional[int] = None
    category: Optional[str] = None

    def __bool__(self):
        return self.ok


def monotonicity_check(table) -> MonotonicityResult:
    """Is the FN rate non-increasing as lesion area grows?

    Accepts an area :class:`ErrorTable` (the QUESTIONABLE row and empty rows
    are skipped) or a plain sequence of rates. ``violation_index`` indexes the
    checked sequence.
    """
    if isinstance(table, ErrorTable):
        if table.task != "area":
            raise InputError("monotonicity_check expects an area-stratified table")
        checked = [
            (r.category, r.fn_rate)
            for r in table.rows
            if r.category != AreaCategory.QUESTIONABLE.name and r.n_total > 0
        ]
    else:
        checked = [(None, Fraction(x) if isinstance(x, int) else x) for x in table]
    for i in range(1, len(checked)):
        if checked[i][1] > checked[i - 1][1]:
            return MonotonicityResult(False, i, checked[i][0])
    return MonotonicityResult(True)


def sample_false_negatives(
    predictions: Sequence[bool],
    gold: Sequence[bool],
    n: int,
    seed: int,
    ids: Optional[Sequence[str]] = None,
) -> list:
    """Uniform sample, without replacement, of false-negative item ids.

    Returns every false negative when there are fewer than ``n``. Ids default
    to positional indices.
    """
    if n < 1:
        raise InputError(f"sample size must be >= 1, got {n}")
    pred = np.asarray(predictions).ravel().astype(bool)
    y = np.asarray(gold).ravel().astype(bool)
    if pred.shape != y.shape:
        raise InputError(f"length mismatch: {pred.size} predictions vs {y.size} labels")
    if ids is None:
        ids = list(range(pred.size))
    fn_idx = np.flatnonzero(y & ~pred)
    if fn_idx.size <= n:
        chosen = fn_idx
    else:
        chosen = np.sort(np.random.default_rng(seed).choice(fn_idx, size=n, replace=False))
    return [ids[i] for i in chosen]


REVIEW_COLUMNS = ("image_quality", "ga_size", "depigmentation", "other_factors")


def write_review_template(path, records: Sequence[ImageRecord], saliency_dir=None) -> Path:
    """Export sampled false negatives with blank columns for manual grading."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_key", "image_path", "saliency_path", *REVIEW_COLUMNS])
        for rec in records:
            sal = ""
            if saliency_dir is not None:
                sal = str(Path(saliency_dir) / f"{_safe(rec.image_key)}.png")
            w.writerow([rec.image_key, str(rec.image_path), sal, *[""] * len(REVIEW_COLUMNS)])
    return path


def _safe(key: str) -> str:
    return key.replace(":", "_").replace("/", "_")
