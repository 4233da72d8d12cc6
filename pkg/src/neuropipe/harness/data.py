"""Turn a dataset manifest into classifier samples or annotated modality slices."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..detector import DetectionSample
from ..errors import ConfigError, EmptyDataset
from ..imaging_io import (
    Modality,
    Plane,
    SliceStack,
    extract_slice,
    normalize_intensity,
    plane_triplet,
    read_manifest,
    read_volume,
    resolve_manifest_path,
    stack_modalities,
)
from ..labels import LesionClass
from ..segmenter import SegmentationSample

ANNOTATION_TAGS = ("SEG", "SUB")


@dataclass
class Subject:
    subject_id: str
    label: str
    split: str
    files: dict[str, Path] = field(default_factory=dict)


@dataclass
class AnnotatedSlice:
    """One multi-modal slice with its lesion instances."""

    subject_id: str
    slice_index: int
    stack: SliceStack
    masks: list[np.ndarray]
    subregions: list[int]

    @property
    def boxes(self) -> np.ndarray:
        from ..boxes import box_from_mask

        if not self.masks:
            return np.zeros((0, 4))
        return np.stack([box_from_mask(m).as_array() for m in self.masks])

    @property
    def union(self) -> np.ndarray:
        if not self.masks:
            return np.zeros((self.stack.height, self.stack.width), dtype=bool)
        return np.any(self.masks, axis=0)

    def detection_sample(self) -> DetectionSample:
        return DetectionSample(self.stack, self.boxes, [1] * len(self.masks))

    def segmentation_sample(self) -> SegmentationSample:
        return SegmentationSample(self.stack, list(self.masks), list(self.subregions))


def load_subjects(manifest) -> list[Subject]:
    """Group manifest rows by subject, keeping first-seen order."""
    subjects: dict[str, Subject] = {}
    for row in read_manifest(manifest):
        s = subjects.setdefault(row.subject_id, Subject(row.subject_id, row.label, row.split))
        tag = row.modality.upper() if row.modality.upper() in ANNOTATION_TAGS else Modality.parse(row.modality).value
        s.files[tag] = resolve_manifest_path(manifest, row)
    return list(subjects.values())


def select_split(subjects: Sequence[Subject], split: Optional[str]) -> list[Subject]:
    if split is None or split == "all":
        return list(subjects)
    return [s for s in subjects if s.split == split]


def _file(subject: Subject, tag: str) -> Path:
    try:
        return subject.files[tag]
    except KeyError:
        raise ConfigError(f"subject {subject.subject_id} has no {tag} volume in the manifest") from None


def classifier_samples(subjects: Sequence[Subject], modality, side: int) -> list[tuple[SliceStack, LesionClass]]:
    """Axial/coronal/sagittal centre slices of one modality, resized to ``side``."""
    tag = Modality.parse(modality).value
    out = []
    for s in subjects:
        vol = normalize_intensity(read_volume(_file(s, tag)))
        out.append((plane_triplet(vol, side=side), LesionClass.parse(s.label)))
    if not out:
        raise EmptyDataset("no subjects selected")
    return out


def annotated_slice(subject: Subject, modalities: Sequence, plane=Plane.AXIAL, index: Optional[int] = None) -> AnnotatedSlice:
    """The slice with the largest lesion area (centre slice if lesion-free) by default."""
    plane = Plane.parse(plane)
    seg = read_volume(_file(subject, "SEG")).voxels
    sub = read_volume(_file(subject, "SUB")).voxels if "SUB" in subject.files else None
    if index is None:
        axes = tuple(a for a in range(3) if a != plane.axis)
        area = (seg > 0).sum(axis=axes)
        index = int(np.argmax(area)) if area.any() else seg.shape[plane.axis] // 2
    slices = [extract_slice(normalize_intensity(read_volume(_file(subject, Modality.parse(m).value))), plane, index) for m in modalities]
    stack = stack_modalities(slices)
    seg2 = np.rint(np.take(seg, index, axis=plane.axis)).astype(np.int64)
    masks, subs = [], []
    for iid in np.unique(seg2[seg2 > 0]):
        m = seg2 == iid
        masks.append(m)
        if sub is not None:
            vals = np.rint(np.take(sub, index, axis=plane.axis)[m]).astype(np.int64)
            subs.append(max(Counter(vals.tolist()).most_common(1)[0][0] - 1, 0))
        else:
            subs.append(0)
    return AnnotatedSlice(subject.subject_id, index, stack, masks, subs)


def annotated_slices(subjects: Sequence[Subject], modalities: Sequence, plane=Plane.AXIAL) -> list[AnnotatedSlice]:
    out = [annotated_slice(s, modalities, plane) for s in subjects]
    if not out:
        raise EmptyDataset("no subjects selected")
    return out
