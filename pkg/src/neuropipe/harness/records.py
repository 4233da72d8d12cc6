"""Text records for detections and instance masks.

Detection file header::

    subject_id,slice_index,category,score,x_min,y_min,x_max,y_max

Instance file header::

    subject_id,slice_index,subregion,score,box,rle_mask

``box`` is ``"x_min y_min x_max y_max"``.  ``rle_mask`` is ``"H W r0 r1 ..."``:
the mask is read row-major and the runs alternate zeros and ones, starting
with a (possibly empty) run of zeros; the runs sum to ``H * W``.  Floats are
written with ``repr`` so they parse back exactly.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from ..errors import CorruptHeader, IoFailure

DETECTION_FIELDS = ("subject_id", "slice_index", "category", "score", "x_min", "y_min", "x_max", "y_max")
INSTANCE_FIELDS = ("subject_id", "slice_index", "subregion", "score", "box", "rle_mask")

PathLike = Union[str, os.PathLike]


def rle_encode(mask: np.ndarray) -> str:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    flat = m.ravel().astype(np.int8)
    # run boundaries, with a leading zero so the first run counts zeros
    change = np.flatnonzero(np.diff(np.concatenate([[0], flat, [1 - flat[-1] if flat.size else 1]])))
    runs = np.diff(np.concatenate([[0], change]))
    return " ".join(str(v) for v in (m.shape[0], m.shape[1], *runs.tolist()))


def rle_decode(text: str) -> np.ndarray:
    try:
        vals = [int(v) for v in text.split()]
    except ValueError:
        raise CorruptHeader(f"bad run-length mask {text!r}") from None
    if len(vals) < 2 or min(vals) < 0:
        raise CorruptHeader(f"bad run-length mask {text!r}")
    h, w, runs = vals[0], vals[1], vals[2:]
    if sum(runs) != h * w:
        raise CorruptHeader(f"runs sum to {sum(runs)}, expected {h * w}")
    flat = np.repeat(np.arange(len(runs)) % 2, runs).astype(bool)
    return flat.reshape(h, w)


@dataclass(frozen=True)
class DetectionRecord:
    subject_id: str
    slice_index: int
    category: int
    score: float
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def box(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass
class InstanceRecord:
    subject_id: str
    slice_index: int
    subregion: str
    score: float
    box: tuple[float, float, float, float]
    mask: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, InstanceRecord):
            return NotImplemented
        return (
            (self.subject_id, self.slice_index, self.subregion, self.score, tuple(self.box))
            == (other.subject_id, other.slice_index, other.subregion, other.score, tuple(other.box))
            and self.mask.shape == other.mask.shape
            and bool(np.array_equal(self.mask, other.mask))
        )


def _open_writer(path: PathLike, header):
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    return fh, w


def _rows(path: PathLike, header):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            if tuple(next(reader, ())) != header:
                raise CorruptHeader(f"{path}: header must be {','.join(header)}")
            return list(reader)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_detections(path: PathLike, records: Iterable[DetectionRecord]) -> None:
    fh, w = _open_writer(path, DETECTION_FIELDS)
    with fh:
        for r in records:
            w.writerow([r.subject_id, r.slice_index, r.category] + [repr(float(v)) for v in (r.score, r.x_min, r.y_min, r.x_max, r.y_max)])


def read_detections(path: PathLike) -> list[DetectionRecord]:
    return [
        DetectionRecord(r[0], int(r[1]), int(r[2]), *(float(v) for v in r[3:8]))
        for r in _rows(path, DETECTION_FIELDS)
    ]


def write_instances(path: PathLike, records: Iterable[InstanceRecord]) -> None:
    fh, w = _open_writer(path, INSTANCE_FIELDS)
    with fh:
        for r in records:
            box = " ".join(repr(float(v)) for v in r.box)
            w.writerow([r.subject_id, r.slice_index, r.subregion, repr(float(r.score)), box, rle_encode(r.mask)])


def read_instances(path: PathLike) -> list[InstanceRecord]:
    out = []
    for r in _rows(path, INSTANCE_FIELDS):
        box = tuple(float(v) for v in r[4].split())
        if len(box) != 4:
            raise ValueError(f"box needs 4 values, got {r[4]!r}")
        out.append(InstanceRecord(r[0], int(r[1]), r[2], float(r[3]), box, rle_decode(r[5])))
    return out
