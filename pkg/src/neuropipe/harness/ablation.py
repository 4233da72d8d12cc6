"""Modality-ablation experiments: retrain and score one model per modality subset."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..detector import DetectionSample, DetectorConfig, build_detector, detect, detection_mask, modality_subset, train_detector
from ..errors import CorruptHeader, EmptySubset, IoFailure
from ..imaging_io import Modality
from ..metrics import ConfusionCounts, dice, mask_confusion
from ..segmenter import SegmentationSample, SegmenterConfig, build_segmenter, segment_instances, train_segmenter
from ..training import TrainConfig
from .data import AnnotatedSlice

INDICATOR_COLUMNS = ("T1", "T1c", "T2", "F/D")
TABLE_HEADER = INDICATOR_COLUMNS + ("dice", "mean_slice_dice", "subset")

# x/- rows of the standard nine-subset table; the last column stands for FLAIR or DWI
_TABLE_PATTERN = (
    (1, 0, 0, 0),
    (0, 1, 0, 0),
    (0, 0, 1, 0),
    (0, 0, 0, 1),
    (0, 1, 1, 1),
    (1, 1, 0, 1),
    (1, 0, 1, 1),
    (1, 1, 1, 0),
    (1, 1, 1, 1),
)


def table_subsets(fourth: Union[Modality, str] = Modality.FLAIR) -> list[tuple[Modality, ...]]:
    cols = (Modality.T1, Modality.T1c, Modality.T2, Modality.parse(fourth))
    return [tuple(m for m, on in zip(cols, row) if on) for row in _TABLE_PATTERN]


def parse_subset(text: str) -> tuple[Modality, ...]:
    """``"T1+T2+FLAIR"`` -> canonical-order modality tuple."""
    names = [t.strip() for t in text.split("+") if t.strip()]
    if not names:
        raise EmptySubset(f"empty modality subset {text!r}")
    return tuple(sorted({Modality.parse(n) for n in names}, key=lambda m: m.rank))


def subset_name(subset: Sequence[Modality]) -> str:
    return "+".join(m.value for m in subset)


@dataclass(frozen=True)
class AblationRow:
    subset: tuple[Modality, ...]
    dice: float
    mean_slice_dice: float

    @property
    def indicators(self) -> tuple[bool, ...]:
        present = set(self.subset)
        fourth = {Modality.FLAIR, Modality.DWI}
        return (
            Modality.T1 in present,
            Modality.T1c in present,
            Modality.T2 in present,
            bool(present & fourth),
        )


def write_ablation_table(path, rows: Sequence[AblationRow]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_HEADER)
            for r in rows:
                w.writerow(["x" if on else "-" for on in r.indicators] + [repr(r.dice), repr(r.mean_slice_dice), subset_name(r.subset)])
    except OSError as exc:
        raise IoFailure(f"cannot write ablation table {path}: {exc}") from exc


def read_ablation_table(path) -> list[AblationRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != TABLE_HEADER:
            raise CorruptHeader(f"{path}: header must be {','.join(TABLE_HEADER)}")
        return [AblationRow(parse_subset(r[6]), float(r[4]), float(r[5])) for r in reader]


def _restrict(slices: Sequence[AnnotatedSlice], subset, fixed_arity: bool) -> list[AnnotatedSlice]:
    return [
        AnnotatedSlice(s.subject_id, s.slice_index, modality_subset(s.stack, subset, fixed_arity), s.masks, s.subregions)
        for s in slices
    ]


def score_masks(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[float, float]:
    """(pooled Dice over all pixels of all slices, mean of per-slice Dice)."""
    total = ConfusionCounts(0, 0, 0, 0)
    per = []
    for pred, truth in pairs:
        total = total + mask_confusion(pred, truth)
        per.append(dice(pred, truth))
    den = 2 * total.tp + total.fp + total.fn
    pooled = 1.0 if den == 0 else 2 * total.tp / den
    return pooled, float(np.mean(per)) if per else 1.0


def _train_and_predict(task: str, train: Sequence[AnnotatedSlice], test: Sequence[AnnotatedSlice], model_cfg: dict, train_cfg: TrainConfig, top_k: int):
    channels = train[0].stack.channels
    if task == "detect":
        model = build_detector(DetectorConfig(**{**model_cfg, "in_channels": channels}))
        train_detector(model, [s.detection_sample() for s in train], train_cfg)
        return [detection_mask(detect(model, s.stack), s.stack.height, s.stack.width, top_k) for s in test]
    model = build_segmenter(SegmenterConfig(**{**model_cfg, "in_channels": channels}))
    train_segmenter(model, [s.segmentation_sample() for s in train], train_cfg)
    out = []
    for s in test:
        inst = segment_instances(model, s.stack)
        out.append(np.any([i.mask for i in inst], axis=0) if inst else np.zeros((s.stack.height, s.stack.width), bool))
    return out


def run_ablation(
    task: str,
    train: Sequence[AnnotatedSlice],
    test: Sequence[AnnotatedSlice],
    subsets: Sequence[Sequence],
    model_cfg: Optional[dict] = None,
    train_cfg: Optional[TrainConfig] = None,
    fixed_arity: bool = False,
    top_k: int = 1,
    out_path=None,
    progress: Optional[Callable[[AblationRow], None]] = None,
) -> list[AblationRow]:
    """Retrain from the same seed on every subset and score test-slice Dice.

    Detector predictions are the union of the top ``top_k`` boxes; segmenter
    predictions are the union of the instance masks.  Every row is an
    independent run, so reordering ``subsets`` only reorders the rows.
    """
    if task not in ("detect", "segment"):
        raise ValueError(f"ablation needs a detect or segment task, got {task!r}")
    if not subsets:
        raise EmptySubset("no modality subsets given")
    subsets = [parse_subset(s) if isinstance(s, str) else parse_subset("+".join(Modality.parse(m).value for m in s)) for s in subsets]
    model_cfg = dict(model_cfg or {})
    train_cfg = train_cfg or TrainConfig()
    rows = []
    for subset in subsets:
        tr, te = _restrict(train, subset, fixed_arity), _restrict(test, subset, fixed_arity)
        preds = _train_and_predict(task, tr, te, model_cfg, train_cfg, top_k)
        pooled, mean = score_masks([(p, s.union) for p, s in zip(preds, te)])
        row = AblationRow(subset, pooled, mean)
        rows.append(row)
        if progress is not None:
            progress(row)
    if out_path is not None:
        write_ablation_table(out_path, rows)
    return rows
