"""Synthetic brain-like phantoms with ellipsoidal lesions and exact ground truth.

A case is a pure function of ``(spec.seed, case_index)``.  Background texture
and lesion geometry use separate random streams, so the lesion-free rendering
of a case (``with_lesions=False``) has exactly the same background voxels.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import SpecInfeasible
from .imaging_io import (
    ManifestRow,
    Modality,
    Plane,
    SliceStack,
    VolumeImage,
    extract_slice,
    normalize_intensity,
    stack_modalities,
    write_manifest,
    write_volume,
)
from .labels import SUBREGIONS, LesionClass

BASE_INTENSITY = {
    Modality.T1: 0.60,
    Modality.T1c: 0.55,
    Modality.T2: 0.40,
    Modality.FLAIR: 0.45,
    Modality.DWI: 0.35,
    Modality.PD: 0.50,
}

# per-subregion lesion offset direction in each modality; every row has a
# unit entry so lesions always reach the configured contrast somewhere
SUBREGION_SIGNATURE = {
    "tumor-core": {Modality.T1: -1.0, Modality.T1c: -0.5, Modality.T2: 1.0, Modality.FLAIR: -0.5, Modality.DWI: 0.5, Modality.PD: 0.5},
    "enhancing-core": {Modality.T1: 0.0, Modality.T1c: 1.0, Modality.T2: 0.5, Modality.FLAIR: 0.5, Modality.DWI: 0.5, Modality.PD: 0.0},
    "non-enhancing-core": {Modality.T1: -1.0, Modality.T1c: -0.5, Modality.T2: 0.5, Modality.FLAIR: 0.5, Modality.DWI: 0.0, Modality.PD: 0.5},
    "edema": {Modality.T1: -0.5, Modality.T1c: 0.0, Modality.T2: 1.0, Modality.FLAIR: 1.0, Modality.DWI: 1.0, Modality.PD: 0.5},
}

# lesion offset multiplier per diagnostic class
CLASS_STRENGTH = {
    LesionClass.TumorHGG: 2.0,
    LesionClass.TumorLGG: 1.0,
    LesionClass.MultipleSclerosis: 1.0,
}


@dataclass(frozen=True)
class SyntheticSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    modalities: tuple[Modality, ...] = (Modality.T1, Modality.T1c, Modality.T2, Modality.FLAIR)
    noise_scale: float = 2.0
    noise_amplitude: float = 0.04
    lesion_count: tuple[int, int] = (1, 1)
    lesion_radius: tuple[float, float] = (4.0, 7.0)
    # optional ((lo0, lo1, lo2), (hi0, hi1, hi2)) box for lesion centres
    lesion_center: Optional[tuple[tuple[float, ...], tuple[float, ...]]] = None
    contrast: float = 0.3
    # modalities allowed to carry lesion contrast; None means all
    contrast_modalities: Optional[tuple[Modality, ...]] = None
    # fixed lesion compartment (index into SUBREGIONS); None draws one per lesion
    subregion: Optional[int] = None
    shell_fractions: tuple[float, float, float, float] = (1.0, 0.75, 0.5, 0.25)
    classes: tuple[LesionClass, ...] = tuple(LesionClass)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        f = self.shell_fractions
        if len(f) != 4 or not all(0 <= v <= 1 for v in f) or not all(a > b for a, b in zip(f, f[1:])):
            raise ValueError(f"shell fractions must be 4 strictly decreasing values in [0,1], got {f}")
        lo, hi = self.lesion_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad lesion count range {self.lesion_count}")
        rlo, rhi = self.lesion_radius
        if not 0 < rlo <= rhi:
            raise ValueError(f"bad lesion radius range {self.lesion_radius}")
        if not self.classes:
            raise ValueError("at least one class is required")
        if self.contrast <= 0:
            raise ValueError("contrast must be positive")
        object.__setattr__(self, "modalities", tuple(Modality.parse(m) for m in self.modalities))
        if self.contrast_modalities is not None:
            object.__setattr__(self, "contrast_modalities", tuple(Modality.parse(m) for m in self.contrast_modalities))
        object.__setattr__(self, "classes", tuple(LesionClass.parse(c) for c in self.classes))


@dataclass
class Lesion:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    subregion: int


@dataclass
class SyntheticCase:
    subject_id: str
    label: LesionClass
    volumes: dict[Modality, VolumeImage]
    instance_masks: list[np.ndarray]
    subregions: list[int]
    lesions: list[Lesion] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int, int]:
        return next(iter(self.volumes.values())).shape

    def instance_map(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.int16)
        for i, m in enumerate(self.instance_masks, start=1):
            out[m] = i
        return out

    def subregion_map(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.uint8)
        for m, s in zip(self.instance_masks, self.subregions):
            out[m] = s + 1
        return out


def ellipsoid_mask(shape: Sequence[int], center: Sequence[float], radii: Sequence[float]) -> np.ndarray:
    """Voxels whose integer index lies inside the ellipsoid."""
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def _shell_depth(shape, center, radii, fractions) -> np.ndarray:
    # number of nested shells containing each voxel (0 outside the lesion)
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    rho = np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii)))
    return sum((rho <= f).astype(np.int64) for f in fractions)


def _rng(spec: SyntheticSpec, case_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed & 0xFFFFFFFF, spec.seed >> 32, case_index, stream])


def case_class(spec: SyntheticSpec, case_index: int) -> LesionClass:
    if spec.lesion_count == (0, 0):
        return LesionClass.Healthy
    return spec.classes[case_index % len(spec.classes)]


def _background(spec: SyntheticSpec, case_index: int, label: LesionClass) -> dict[Modality, np.ndarray]:
    rng = _rng(spec, case_index, 0)
    shape = spec.shape
    head = ellipsoid_mask(shape, [(s - 1) / 2 for s in shape], [0.47 * s for s in shape])
    out = {}
    for m in spec.modalities:
        tex = gaussian_filter(rng.standard_normal(shape), spec.noise_scale, mode="wrap")
        tex *= spec.noise_amplitude / max(tex.std(), 1e-12)
        vol = np.where(head, BASE_INTENSITY[m] + tex, 0.0)
        out[m] = vol
    if label == LesionClass.Alzheimer:
        # atrophy: enlarged dark ventricles, thinner tissue signal
        vent = ellipsoid_mask(shape, [(s - 1) / 2 for s in shape], [0.22 * shape[0], 0.12 * shape[1], 0.16 * shape[2]])
        for m in out:
            out[m] = np.where(vent, out[m] - 1.5 * spec.contrast, out[m] * 0.9)
    return out


def _draw_lesions(spec: SyntheticSpec, case_index: int, label: LesionClass) -> list[Lesion]:
    if label in (LesionClass.Healthy, LesionClass.Alzheimer):
        return []
    rng = _rng(spec, case_index, 1)
    lo, hi = spec.lesion_count
    n = int(rng.integers(lo, hi + 1))
    rlo, rhi = spec.lesion_radius
    if label == LesionClass.MultipleSclerosis:
        n = max(3, 3 * n)
        rlo = rhi = max(1.5, 0.6 * rlo)
    shape = np.asarray(spec.shape, dtype=np.float64)
    if 2 * rlo + 1 > shape.min():
        raise SpecInfeasible(f"radius {rlo} cannot fit in extent {spec.shape}")
    lesions: list[Lesion] = []
    occupied = np.zeros(spec.shape, dtype=bool)
    for _ in range(n):
        for _attempt in range(100):
            radii = rng.uniform(rlo, rhi, size=3)
            radii = np.minimum(radii, (shape - 1) / 2)
            if spec.lesion_center is not None:
                c_lo, c_hi = (np.asarray(v, dtype=np.float64) for v in spec.lesion_center)
            else:
                half = (shape - 1) / 2
                slack = np.maximum(half - radii - 1, 0)
                c_lo, c_hi = half - 0.5 * slack, half + 0.5 * slack
            center = rng.uniform(c_lo, c_hi)
            sub = spec.subregion if spec.subregion is not None else int(rng.integers(len(SUBREGIONS)))
            if label == LesionClass.MultipleSclerosis and spec.subregion is None:
                sub = SUBREGIONS.index("edema")
            if any(c - r < 0 or c + r > s - 1 for c, r, s in zip(center, radii, shape)):
                continue
            m = ellipsoid_mask(spec.shape, center, radii)
            if not m.any() or (m & occupied).any():
                continue
            occupied |= m
            lesions.append(Lesion(tuple(float(v) for v in center), tuple(float(v) for v in radii), sub))
            break
        else:
            if not lesions:
                raise SpecInfeasible("could not place a lesion inside the volume")
    return lesions


def generate_case(spec: SyntheticSpec, case_index: int, with_lesions: bool = True) -> SyntheticCase:
    label = case_class(spec, case_index)
    vols = _background(spec, case_index, label)
    lesions = _draw_lesions(spec, case_index, label)
    masks, subs = [], []
    strength = CLASS_STRENGTH.get(label, 1.0) * spec.contrast
    for les in lesions:
        mask = ellipsoid_mask(spec.shape, les.center, les.radii)
        # inner shells are brighter: profile 1.0 at the rim up to 1.75 at the core
        depth = _shell_depth(spec.shape, les.center, les.radii, spec.shell_fractions)
        profile = 1.0 + 0.25 * (np.maximum(depth, 1) - 1)
        sig = SUBREGION_SIGNATURE[SUBREGIONS[les.subregion]]
        if spec.contrast_modalities is not None:
            sig = {m: (1.0 if m in spec.contrast_modalities else 0.0) for m in sig}
        if with_lesions:
            for m in vols:
                vols[m] = np.where(mask, vols[m] + strength * sig[m] * profile, vols[m])
        masks.append(mask)
        subs.append(les.subregion)
    sid = f"case{case_index:04d}"
    volumes = {
        m: VolumeImage(v.astype(np.float32), spec.spacing, m, sid) for m, v in vols.items()
    }
    return SyntheticCase(sid, label, volumes, masks, subs, lesions)


# ---------------------------------------------------------------------------
# 2D views


def lesion_slice_index(case: SyntheticCase, plane: Plane = Plane.AXIAL) -> int:
    """Slice index with the largest lesion area (the centre slice when lesion-free)."""
    if not case.instance_masks:
        return case.shape[plane.axis] // 2
    union = np.any(case.instance_masks, axis=0)
    axes = tuple(a for a in range(3) if a != plane.axis)
    return int(np.argmax(union.sum(axis=axes)))


@dataclass
class SliceSample:
    """One annotated 2D multi-modal slice."""

    stack: SliceStack
    masks: list[np.ndarray]
    subregions: list[int]
    label: LesionClass = LesionClass.Healthy

    @property
    def boxes(self) -> np.ndarray:
        from .boxes import box_from_mask

        if not self.masks:
            return np.zeros((0, 4))
        return np.stack([box_from_mask(m).as_array() for m in self.masks])


def case_slice(
    case: SyntheticCase,
    plane: Plane = Plane.AXIAL,
    index: Optional[int] = None,
    normalize: bool = True,
    modalities: Optional[Sequence[Modality]] = None,
) -> SliceSample:
    plane = Plane.parse(plane)
    if index is None:
        index = lesion_slice_index(case, plane)
    mods = modalities or list(case.volumes)
    slices = []
    for m in mods:
        vol = case.volumes[m]
        if normalize:
            vol = normalize_intensity(vol)
        slices.append(extract_slice(vol, plane, index))
    stack = stack_modalities(slices)
    masks, subs = [], []
    for m, s in zip(case.instance_masks, case.subregions):
        m2 = np.take(m, index, axis=plane.axis)
        if m2.any():
            masks.append(m2.copy())
            subs.append(s)
    return SliceSample(stack, masks, subs, case.label)


# ---------------------------------------------------------------------------
# On-disk datasets


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.min() < 0 or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {list(fractions)}")
    raw = fr * n
    counts = np.floor(raw + 1e-9).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


SPLIT_NAMES = {1: ("train",), 2: ("train", "test"), 3: ("train", "val", "test")}


def generate_dataset(
    spec: SyntheticSpec,
    n_cases: int,
    split_fractions: Sequence[float] = (0.8, 0.2),
    out_dir=".",
    plane_hint: str = "axial",
) -> Path:
    """Write every case as NIfTI volumes plus a manifest; returns the manifest path.

    Per case: one float32 volume per modality, an instance-id volume
    (modality column ``SEG``) and a compartment volume (``SUB``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = split_counts(n_cases, split_fractions)
    names = SPLIT_NAMES.get(len(counts)) or tuple(f"split{i}" for i in range(len(counts)))
    splits = [name for name, c in zip(names, counts) for _ in range(c)]
    rows = []
    for i in range(n_cases):
        case = generate_case(spec, i)
        for m, vol in case.volumes.items():
            fname = f"{case.subject_id}_{m.value}.nii"
            write_volume(vol, out / fname)
            rows.append(ManifestRow(case.subject_id, fname, m.value, plane_hint, case.label.name, splits[i]))
        for tag, arr in (("SEG", case.instance_map()), ("SUB", case.subregion_map())):
            fname = f"{case.subject_id}_{tag.lower()}.nii"
            write_volume(VolumeImage(arr, spec.spacing, None, case.subject_id), out / fname)
            rows.append(ManifestRow(case.subject_id, fname, tag, plane_hint, case.label.name, splits[i]))
    manifest = out / "manifest.csv"
    write_manifest(rows, manifest)
    return manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def spec_from_mapping(values: Mapping[str, object]) -> SyntheticSpec:
    """Build a spec from loosely typed config values (lists become tuples)."""
    kw = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    if "lesion_center" in kw and kw["lesion_center"] is not None:
        flat = tuple(float(x) for x in kw["lesion_center"])
        kw["lesion_center"] = (flat[:3], flat[3:])
    return SyntheticSpec(**kw)
