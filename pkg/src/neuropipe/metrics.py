"""Overlap and confusion metrics.

Counts stay Python integers until the final division; every metric whose
denominator population is empty is defined as 1.0.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Optional, Sequence, Union

import numpy as np

from .boxes import BoundingBox
from .errors import IoFailure, LengthMismatch, ShapeMismatch

METRIC_NAMES = ("dice", "sensitivity", "specificity", "accuracy")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    return _ratio(2 * inter, int(np.count_nonzero(a)) + int(np.count_nonzero(b)))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def confusion(pred: Sequence[Hashable], truth: Sequence[Hashable], positive: Hashable) -> ConfusionCounts:
    """One-vs-rest counts for ``positive`` over paired label sequences."""
    pred, truth = list(np.asarray(pred).reshape(-1)), list(np.asarray(truth).reshape(-1))
    if len(pred) != len(truth):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(truth)} labels")
    tp = fp = tn = fn = 0
    for p, t in zip(pred, truth):
        pp, tt = p == positive, t == positive
        if pp and tt:
            tp += 1
        elif pp:
            fp += 1
        elif tt:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


def mask_confusion(pred_mask, truth_mask) -> ConfusionCounts:
    p = np.asarray(pred_mask).astype(bool)
    t = np.asarray(truth_mask).astype(bool)
    if p.shape != t.shape:
        raise ShapeMismatch(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def metrics_from_counts(c: ConfusionCounts) -> dict[str, float]:
    return {
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "accuracy": _ratio(c.tp + c.tn, c.total),
    }


@dataclass
class MetricsReport:
    per_key: dict[str, dict[str, float]]
    counts: dict[str, ConfusionCounts] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def macro(self) -> dict[str, float]:
        if not self.per_key:
            return {m: 1.0 for m in METRIC_NAMES}
        return {m: sum(v[m] for v in self.per_key.values()) / len(self.per_key) for m in METRIC_NAMES}

    def rows(self) -> list[list]:
        out = [[k] + [v[m] for m in METRIC_NAMES] for k, v in self.per_key.items()]
        out.append(["macro"] + [self.macro[m] for m in METRIC_NAMES])
        return out

    def write(self, path: Union[str, os.PathLike]) -> None:
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("key",) + METRIC_NAMES)
                for row in self.rows():
                    w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
                for k, v in self.extra.items():
                    w.writerow([f"#{k}", repr(float(v))])
        except OSError as exc:
            raise IoFailure(f"cannot write report {path}: {exc}") from exc


def read_report(path: Union[str, os.PathLike]) -> MetricsReport:
    per_key, extra = {}, {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            if row[0].startswith("#"):
                extra[row[0][1:]] = float(row[1])
            elif row[0] != "macro":
                per_key[row[0]] = {m: float(v) for m, v in zip(header[1:], row[1:])}
    return MetricsReport(per_key, extra=extra)


def summarize(counts: Mapping[str, ConfusionCounts], extra: Optional[Mapping[str, float]] = None) -> MetricsReport:
    per_key = {str(k): metrics_from_counts(c) for k, c in counts.items()}
    return MetricsReport(per_key, dict(counts), dict(extra or {}))


def classification_report(pred: Sequence, truth: Sequence, keys: Sequence) -> MetricsReport:
    """One-vs-rest report for every key plus overall accuracy in ``extra``."""
    counts = {str(getattr(k, "name", k)): confusion(pred, truth, k) for k in keys}
    n = len(truth)
    correct = sum(int(p == t) for p, t in zip(pred, truth))
    return summarize(counts, {"overall_accuracy": _ratio(correct, n)})
