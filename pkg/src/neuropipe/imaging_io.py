"""Volume ingestion: NIfTI-1, MetaImage and Analyze 7.5 codecs, plane slicing,
VOI cropping and multi-channel slice assembly.

Axis convention used everywhere in the package: a volume array is indexed
``voxels[axial, coronal, sagittal]``.  On disk the fastest-varying index is
the sagittal one (NIfTI ``i`` / MetaImage ``x``), so a C-ordered array maps
straight onto the file payload without transposition.
"""
from __future__ import annotations

import csv
import enum
import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import (
    CorruptHeader,
    DuplicateModality,
    IndexOutOfRange,
    IoFailure,
    NonFiniteData,
    ProvenanceMismatch,
    ShapeMismatch,
    UnknownFormat,
    VoiOutOfBounds,
)

PathLike = Union[str, os.PathLike]


class Modality(enum.Enum):
    """MRI acquisition type. Definition order is the canonical channel order."""

    T1 = "T1"
    T1c = "T1c"
    T2 = "T2"
    FLAIR = "FLAIR"
    DWI = "DWI"
    PD = "PD"

    @classmethod
    def parse(cls, text: Union[str, "Modality"]) -> "Modality":
        if isinstance(text, Modality):
            return text
        key = text.strip().upper().replace("-", "").replace("_", "")
        aliases = {"T1CE": "T1C", "T1CONTRAST": "T1C", "T1GD": "T1C", "F": "FLAIR"}
        key = aliases.get(key, key)
        for m in cls:
            if m.value.upper() == key:
                return m
        raise ValueError(f"unknown modality {text!r}")

    @property
    def rank(self) -> int:
        return list(Modality).index(self)


CANONICAL_MODALITIES = tuple(Modality)


class Plane(enum.Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def axis(self) -> int:
        return {"axial": 0, "coronal": 1, "sagittal": 2}[self.value]

    @classmethod
    def parse(cls, text: Union[str, "Plane"]) -> "Plane":
        if isinstance(text, Plane):
            return text
        return cls(text.strip().lower())


@dataclass(frozen=True)
class VoiSpec:
    """Axis-aligned box of voxels; ``upper`` is exclusive."""

    lower: tuple[int, int, int]
    upper: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lower)
        hi = tuple(int(v) for v in self.upper)
        if len(lo) != 3 or len(hi) != 3:
            raise VoiOutOfBounds("VOI corners must have three components")
        if any(a >= b for a, b in zip(lo, hi)):
            raise VoiOutOfBounds(f"VOI lower {lo} must be < upper {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def full(cls, shape: Sequence[int]) -> "VoiSpec":
        return cls((0, 0, 0), tuple(int(s) for s in shape))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.lower, self.upper))

    def compose(self, inner: "VoiSpec") -> "VoiSpec":
        """VOI ``inner`` (relative to this VOI) expressed in parent coordinates."""
        return VoiSpec(
            tuple(a + b for a, b in zip(self.lower, inner.lower)),
            tuple(a + b for a, b in zip(self.lower, inner.upper)),
        )


@dataclass
class VolumeImage:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Optional[Modality] = None
    subject_id: str = ""
    normalized: bool = False

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ShapeMismatch(f"volume must be 3D with extents >= 1, got {self.voxels.shape}")
        if self.voxels.dtype.kind not in "iuf":
            raise ShapeMismatch(f"unsupported voxel dtype {self.voxels.dtype}")
        if self.voxels.dtype.kind == "f" and not np.isfinite(self.voxels).all():
            raise NonFiniteData("volume contains NaN or Inf voxels")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        self.spacing = sp
        if self.modality is not None:
            self.modality = Modality.parse(self.modality)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class Provenance:
    subject_id: str = ""
    plane: Optional[Plane] = None
    index: Optional[int] = None
    voi: Optional[VoiSpec] = None
    modality: Optional[Modality] = None
    flags: tuple[str, ...] = ()

    def same_slice(self, other: "Provenance") -> bool:
        return (self.subject_id, self.plane, self.index, self.voi) == (
            other.subject_id,
            other.plane,
            other.index,
            other.voi,
        )


ChannelTag = Union[Modality, Plane]


@dataclass
class SliceStack:
    """A 2D multi-channel image stored as ``pixels[H, W, C]``."""

    pixels: np.ndarray
    channel_tags: tuple[ChannelTag, ...]
    provenance: Provenance = field(default_factory=Provenance)
    normalized: bool = False

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or min(self.pixels.shape) < 1:
            raise ShapeMismatch(f"slice stack must be H x W x C, got {self.pixels.shape}")
        self.channel_tags = tuple(self.channel_tags)
        c = self.pixels.shape[2]
        if not 1 <= c <= 6:
            raise ShapeMismatch(f"channel count must be in 1..6, got {c}")
        if len(self.channel_tags) != c:
            raise ShapeMismatch(f"{len(self.channel_tags)} tags for {c} channels")
        kinds = {type(t) for t in self.channel_tags}
        if len(kinds) != 1 or not kinds <= {Modality, Plane}:
            raise ShapeMismatch("channel tags must be all modalities or all planes")
        if kinds == {Modality} and len(set(self.channel_tags)) != c:
            raise DuplicateModality(f"duplicate modality in {self.channel_tags}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def channel(self, tag: ChannelTag) -> np.ndarray:
        return self.pixels[:, :, self.channel_tags.index(tag)]

    def chw(self) -> np.ndarray:
        """Channel-first float32 copy, the layout the models consume."""
        return np.ascontiguousarray(np.transpose(self.pixels, (2, 0, 1)), dtype=np.float32)

    def with_pixels(self, pixels: np.ndarray) -> "SliceStack":
        return replace(self, pixels=pixels)


# ---------------------------------------------------------------------------
# Codecs

_NIFTI_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_ANALYZE_CODES = {k: v for k, v in _NIFTI_CODES.items() if k in (2, 4, 8, 16, 64)}

_MET_TYPES = {
    "MET_UCHAR": np.uint8,
    "MET_CHAR": np.int8,
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_INT": np.int32,
    "MET_UINT": np.uint32,
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
}

FORMATS = ("nifti", "mha", "analyze")


def detect_format(path: PathLike, format_hint: Optional[str] = None) -> str:
    if format_hint is not None:
        hint = format_hint.lower().lstrip(".")
        hint = {"nii": "nifti", "metaimage": "mha", "hdr": "analyze", "img": "analyze"}.get(hint, hint)
        if hint not in FORMATS:
            raise UnknownFormat(f"unsupported format hint {format_hint!r}")
        return hint
    name = str(path).lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if name.endswith(".mha"):
        return "mha"
    if name.endswith(".hdr") or name.endswith(".img"):
        return "analyze"
    raise UnknownFormat(f"cannot infer volume format from {path!s}")


def _analyze_pair(path: PathLike) -> tuple[Path, Path]:
    p = Path(path)
    return p.with_suffix(".hdr"), p.with_suffix(".img")


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if path.name.lower().endswith(".gz"):
        raw = gzip.decompress(raw)
    return raw


def _parse_348_header(hdr: bytes, allow_big_endian: bool) -> dict:
    if len(hdr) < 348:
        raise CorruptHeader(f"header is {len(hdr)} bytes, expected 348")
    if struct.unpack("<i", hdr[:4])[0] == 348:
        end = "<"
    elif struct.unpack(">i", hdr[:4])[0] == 348:
        if not allow_big_endian:
            raise CorruptHeader("big-endian Analyze headers are not supported")
        end = ">"
    else:
        raise CorruptHeader("sizeof_hdr field is not 348")
    dim = struct.unpack(end + "8h", hdr[40:56])
    datatype, bitpix = struct.unpack(end + "2h", hdr[70:74])
    pixdim = struct.unpack(end + "8f", hdr[76:108])
    vox_offset, slope, inter = struct.unpack(end + "3f", hdr[108:120])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise CorruptHeader(f"invalid dim[0] = {ndim}")
    extents = list(dim[1 : ndim + 1])
    # trailing singleton dimensions are allowed, anything else is not a 3D volume
    if ndim > 3 and any(e != 1 for e in extents[3:]):
        raise CorruptHeader(f"expected a 3D volume, header declares {extents}")
    extents = (extents + [1, 1, 1])[:3]
    if any(e < 1 for e in extents):
        raise CorruptHeader(f"non-positive extent in {extents}")
    return dict(
        endian=end,
        extents=extents,
        datatype=datatype,
        bitpix=bitpix,
        spacing=[abs(pixdim[i]) for i in (1, 2, 3)],
        vox_offset=vox_offset,
        slope=slope,
        inter=inter,
        magic=hdr[344:348],
        descrip=hdr[148:228].split(b"\0", 1)[0].decode("latin-1"),
    )


def _payload_to_voxels(payload: bytes, dtype, endian: str, extents: Sequence[int]) -> np.ndarray:
    dt = np.dtype(dtype).newbyteorder(endian)
    n = int(np.prod(extents))
    if len(payload) != n * dt.itemsize:
        raise CorruptHeader(
            f"header declares {n} voxels ({n * dt.itemsize} bytes) but payload has {len(payload)} bytes"
        )
    arr = np.frombuffer(payload, dtype=dt).astype(np.dtype(dtype).newbyteorder("="))
    nx, ny, nz = extents
    return arr.reshape(nz, ny, nx)


def _parse_descrip(descrip: str) -> dict:
    out = {}
    for part in descrip.split(";"):
        if "=" in part:
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _read_nifti_like(hdr: bytes, payload: bytes, codes: dict, allow_big_endian: bool):
    h = _parse_348_header(hdr, allow_big_endian)
    if h["datatype"] not in codes:
        raise CorruptHeader(f"unsupported datatype code {h['datatype']}")
    dtype = codes[h["datatype"]]
    vox = _payload_to_voxels(payload, dtype, h["endian"], h["extents"])
    is_nifti = h["magic"] in (b"n+1\0", b"ni1\0")
    if is_nifti and h["slope"] != 0.0 and (h["slope"] != 1.0 or h["inter"] != 0.0):
        vox = vox.astype(np.float64) * h["slope"] + h["inter"]
    if any(s <= 0 for s in h["spacing"]):
        raise CorruptHeader(f"non-positive voxel spacing {h['spacing']}")
    sx, sy, sz = h["spacing"]
    return vox, (sz, sy, sx), _parse_descrip(h["descrip"])


def _read_nifti(path: Path):
    raw = _read_bytes(path)
    h = _parse_348_header(raw[:348], allow_big_endian=True)
    if h["magic"] != b"n+1\0":
        raise CorruptHeader("single-file NIfTI must carry the 'n+1' magic")
    offset = int(h["vox_offset"])
    if offset < 348 or offset > len(raw):
        raise CorruptHeader(f"vox_offset {h['vox_offset']} outside file")
    return _read_nifti_like(raw[:348], raw[offset:], _NIFTI_CODES, True)


def _read_analyze(path: Path):
    hdr_path, img_path = _analyze_pair(path)
    hdr = _read_bytes(hdr_path)
    if len(hdr) != 348:
        raise CorruptHeader(f"{hdr_path} is {len(hdr)} bytes, expected 348")
    payload = _read_bytes(img_path)
    offset = int(_parse_348_header(hdr, allow_big_endian=False)["vox_offset"])
    return _read_nifti_like(hdr, payload[offset:], _ANALYZE_CODES, False)


def _read_mha(path: Path):
    raw = _read_bytes(path)
    header: dict[str, str] = {}
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CorruptHeader("MetaImage header has no ElementDataFile line")
        line = raw[pos:nl].decode("latin-1").strip()
        pos = nl + 1
        if not line:
            continue
        if "=" not in line:
            raise CorruptHeader(f"malformed MetaImage header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        header[key] = value
        if key == "ElementDataFile":
            break
    if header["ElementDataFile"].upper() != "LOCAL":
        raise UnknownFormat("only MetaImage files with local raw data are supported")
    if header.get("CompressedData", "False").lower() == "true":
        raise UnknownFormat("compressed MetaImage payloads are not supported")
    if int(header.get("ElementNumberOfChannels", "1")) != 1:
        raise UnknownFormat("multi-channel MetaImage is not supported")
    try:
        ndims = int(header["NDims"])
        dims = [int(v) for v in header["DimSize"].split()]
        etype = _MET_TYPES[header["ElementType"]]
    except KeyError as exc:
        raise CorruptHeader(f"MetaImage header missing or invalid field {exc}") from exc
    if ndims != len(dims) or not 1 <= ndims <= 3:
        raise CorruptHeader(f"NDims {ndims} inconsistent with DimSize {dims}")
    dims = (dims + [1, 1, 1])[:3]
    spacing_key = "ElementSpacing" if "ElementSpacing" in header else "ElementSize"
    spacing = [float(v) for v in header.get(spacing_key, "1 1 1").split()]
    spacing = (spacing + [1.0, 1.0, 1.0])[:3]
    msb = header.get("ElementByteOrderMSB", header.get("BinaryDataByteOrderMSB", "False"))
    endian = ">" if msb.lower() == "true" else "<"
    vox = _payload_to_voxels(raw[pos:], etype, endian, dims)
    if any(s <= 0 for s in spacing):
        raise CorruptHeader(f"non-positive voxel spacing {spacing}")
    return vox, (spacing[2], spacing[1], spacing[0]), {}


def read_volume(
    path: PathLike,
    format_hint: Optional[str] = None,
    *,
    modality: Union[Modality, str, None] = None,
    subject_id: Optional[str] = None,
) -> VolumeImage:
    """Load one 3D volume.

    Integer payloads keep their storage dtype; NIfTI scaling (``scl_slope``
    other than 0 or 1) promotes to float64. NaN/Inf voxels are rejected.
    """
    fmt = detect_format(path, format_hint)
    p = Path(path)
    if fmt == "nifti":
        vox, spacing, meta = _read_nifti(p)
    elif fmt == "mha":
        vox, spacing, meta = _read_mha(p)
    else:
        vox, spacing, meta = _read_analyze(p)
    if vox.dtype.kind == "f" and not np.isfinite(vox).all():
        raise NonFiniteData(f"{path} contains NaN or Inf voxels")
    if modality is None and meta.get("modality"):
        modality = meta["modality"]
    if subject_id is None:
        subject_id = meta.get("subject", p.name.split(".")[0])
    return VolumeImage(np.ascontiguousarray(vox), spacing, modality, subject_id)


def _nifti_header(vol: VolumeImage, codes: dict, nifti: bool) -> bytes:
    dtype = vol.voxels.dtype.newbyteorder("=")
    code = next((k for k, v in codes.items() if np.dtype(v) == dtype), None)
    if code is None:
        raise UnknownFormat(f"dtype {dtype} cannot be stored in this format")
    nz, ny, nx = vol.shape
    sz, sy, sx = vol.spacing
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<i", hdr, 32, 16384)
    hdr[38:39] = b"r"
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, 352.0 if nifti else 0.0, 1.0 if nifti else 0.0, 0.0)
    descrip = f"modality={vol.modality.value if vol.modality else ''};subject={vol.subject_id}"
    hdr[148:228] = descrip.encode("latin-1")[:79].ljust(80, b"\0")
    if nifti:
        hdr[123] = 2  # xyzt_units: mm
        struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
        struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, 0.0)
        struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, 0.0)
        struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, 0.0)
        hdr[344:348] = b"n+1\0"
    return bytes(hdr)


def _payload(vol: VolumeImage) -> bytes:
    return np.ascontiguousarray(vol.voxels).astype(vol.voxels.dtype.newbyteorder("<")).tobytes()


def _mha_bytes(vol: VolumeImage) -> bytes:
    dtype = vol.voxels.dtype.newbyteorder("=")
    name = next((k for k, v in _MET_TYPES.items() if np.dtype(v) == dtype), None)
    if name is None:
        raise UnknownFormat(f"dtype {dtype} cannot be stored as MetaImage")
    nz, ny, nx = vol.shape
    sz, sy, sx = vol.spacing
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = 0 0 0",
        "CenterOfRotation = 0 0 0",
        "AnatomicalOrientation = RAI",
        f"ElementSpacing = {sx!r} {sy!r} {sz!r}",
        f"DimSize = {nx} {ny} {nz}",
        f"ElementType = {name}",
        "ElementDataFile = LOCAL",
    ]
    return ("\n".join(lines) + "\n").encode("ascii") + _payload(vol)


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        if path.name.lower().endswith(".gz"):
            data = gzip.compress(data, mtime=0)
        path.write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_volume(vol: VolumeImage, path: PathLike, format: Optional[str] = None) -> None:
    """Write ``vol`` so that :func:`read_volume` returns the same voxels and spacing.

    NIfTI and Analyze headers hold spacing as float32.
    """
    fmt = detect_format(path, format)
    p = Path(path)
    if fmt == "nifti":
        _write_bytes(p, _nifti_header(vol, _NIFTI_CODES, True) + b"\0" * 4 + _payload(vol))
    elif fmt == "mha":
        _write_bytes(p, _mha_bytes(vol))
    else:
        hdr_path, img_path = _analyze_pair(p)
        _write_bytes(hdr_path, _nifti_header(vol, _ANALYZE_CODES, False))
        _write_bytes(img_path, _payload(vol))


# ---------------------------------------------------------------------------
# Geometry


def normalize_intensity(vol: VolumeImage) -> VolumeImage:
    """Per-volume min-max scaling to [0, 1]; a constant volume maps to zeros."""
    v = vol.voxels.astype(np.float64)
    lo, hi = v.min(), v.max()
    scaled = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    return replace(vol, voxels=scaled, normalized=True)


def _linear_taps(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped (same convention as align_corners=False)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an ``H x W`` or ``H x W x C`` array."""
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape[:2]
    if (h, w) == (out_h, out_w):
        return a.copy()
    r0, r1, wr = _linear_taps(h, out_h)
    c0, c1, wc = _linear_taps(w, out_w)
    extra = (1,) * (a.ndim - 2)
    wr = wr.reshape((-1, 1) + extra)
    rows = a[r0] * (1 - wr) + a[r1] * wr
    wc = wc.reshape((1, -1) + extra)
    return rows[:, c0] * (1 - wc) + rows[:, c1] * wc


def extract_slice(vol: VolumeImage, plane: Union[Plane, str], index: int) -> SliceStack:
    plane = Plane.parse(plane)
    extent = vol.shape[plane.axis]
    if not 0 <= index < extent:
        raise IndexOutOfRange(f"{plane.value} index {index} outside [0, {extent})")
    sl = np.take(vol.voxels, index, axis=plane.axis).copy()
    prov = Provenance(vol.subject_id, plane, int(index), None, vol.modality)
    return SliceStack(sl[:, :, None], (plane,), prov, vol.normalized)


def extract_voi(vol: VolumeImage, voi: VoiSpec) -> VolumeImage:
    if any(u > s for u, s in zip(voi.upper, vol.shape)) or any(l < 0 for l in voi.lower):
        raise VoiOutOfBounds(f"VOI {voi.lower}..{voi.upper} exceeds volume extent {vol.shape}")
    (a0, a1, a2), (b0, b1, b2) = voi.lower, voi.upper
    return replace(vol, voxels=vol.voxels[a0:b0, a1:b1, a2:b2].copy())


def plane_triplet(vol: VolumeImage, voi: Optional[VoiSpec] = None, side: int = 256) -> SliceStack:
    """Centre axial, coronal and sagittal slices of the VOI, each resized to
    ``side x side`` and stacked in that channel order."""
    voi = voi or VoiSpec.full(vol.shape)
    crop = extract_voi(vol, voi).voxels
    c = [s // 2 for s in crop.shape]
    planes = [crop[c[0], :, :], crop[:, c[1], :], crop[:, :, c[2]]]
    chans = [resize_bilinear(p, side, side) for p in planes]
    prov = Provenance(vol.subject_id, None, None, voi, vol.modality)
    tags = (Plane.AXIAL, Plane.CORONAL, Plane.SAGITTAL)
    return SliceStack(np.stack(chans, axis=-1), tags, prov, vol.normalized)


def _modality_of(s: SliceStack) -> Modality:
    tag = s.channel_tags[0]
    if isinstance(tag, Modality):
        return tag
    if s.provenance.modality is None:
        raise ValueError("slice carries no modality tag")
    return s.provenance.modality


def stack_modalities(slices: Sequence[SliceStack]) -> SliceStack:
    """Merge single-channel slices of one subject/slice into a modality stack
    in canonical modality order."""
    if not slices:
        raise ShapeMismatch("need at least one slice")
    for s in slices:
        if s.channels != 1:
            raise ShapeMismatch("stack_modalities takes single-channel slices")
        if s.pixels.shape[:2] != slices[0].pixels.shape[:2]:
            raise ShapeMismatch(f"slice shapes differ: {s.pixels.shape[:2]} vs {slices[0].pixels.shape[:2]}")
        if not s.provenance.same_slice(slices[0].provenance):
            raise ProvenanceMismatch("slices come from different subjects or slice positions")
    mods = [_modality_of(s) for s in slices]
    if len(set(mods)) != len(mods):
        raise DuplicateModality(f"duplicate modality in {[m.value for m in mods]}")
    order = sorted(range(len(slices)), key=lambda i: mods[i].rank)
    pixels = np.concatenate([slices[i].pixels for i in order], axis=2)
    prov = replace(slices[0].provenance, modality=None)
    normalized = all(s.normalized for s in slices)
    return SliceStack(pixels, tuple(mods[i] for i in order), prov, normalized)


# ---------------------------------------------------------------------------
# Dataset manifest

MANIFEST_FIELDS = ("subject_id", "path", "modality", "plane_hint", "label", "split")


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    path: str
    modality: str
    plane_hint: str = ""
    label: str = ""
    split: str = "train"


def write_manifest(rows: Iterable[ManifestRow], path: PathLike) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_FIELDS)
            for r in rows:
                w.writerow([getattr(r, f) for f in MANIFEST_FIELDS])
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path: PathLike) -> list[ManifestRow]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                raise CorruptHeader(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
            return [ManifestRow(**{k: row[k] for k in MANIFEST_FIELDS}) for row in reader]
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc


def resolve_manifest_path(manifest: PathLike, row: ManifestRow) -> Path:
    p = Path(row.path)
    return p if p.is_absolute() else Path(manifest).parent / p
