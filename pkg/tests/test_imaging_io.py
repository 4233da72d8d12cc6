import itertools
import struct

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from neuropipe.errors import (
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
from neuropipe.imaging_io import (
    ManifestRow,
    Modality,
    Plane,
    SliceStack,
    VoiSpec,
    VolumeImage,
    extract_slice,
    extract_voi,
    normalize_intensity,
    plane_triplet,
    read_manifest,
    read_volume,
    resize_bilinear,
    stack_modalities,
    write_manifest,
    write_volume,
)

EXT = {"nifti": "nii", "mha": "mha", "analyze": "hdr"}


def ramp(shape=(4, 4, 4), dtype=np.int16):
    return np.arange(np.prod(shape)).reshape(shape).astype(dtype)


@pytest.mark.parametrize("fmt", ["nifti", "mha", "analyze"])
@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
def test_round_trip_identity(tmp_path, fmt, dtype):
    vol = VolumeImage(ramp((3, 4, 5), dtype), (1.0, 1.5, 2.0), Modality.T2, "s1")
    path = tmp_path / f"v.{EXT[fmt]}"
    write_volume(vol, path, fmt)
    back = read_volume(path)
    assert back.voxels.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(back.voxels, vol.voxels)
    assert back.spacing == vol.spacing


@pytest.mark.parametrize("fmt", ["nifti", "mha", "analyze"])
def test_singleton_volume(tmp_path, fmt):
    path = tmp_path / f"one.{EXT[fmt]}"
    write_volume(VolumeImage(np.full((1, 1, 1), 7, dtype=np.int16)), path)
    assert read_volume(path).voxels[0, 0, 0] == 7


@settings(max_examples=25, deadline=None)
@given(
    arr=hnp.arrays(
        np.float32,
        hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6),
        elements=st.floats(-1e6, 1e6, width=32),
    ),
    fmt=st.sampled_from(["nifti", "mha", "analyze"]),
)
def test_round_trip_property(tmp_path_factory, arr, fmt):
    path = tmp_path_factory.mktemp("rt") / f"p.{EXT[fmt]}"
    vol = VolumeImage(arr, (0.5, 1.0, 3.0))
    write_volume(vol, path)
    back = read_volume(path)
    np.testing.assert_array_equal(back.voxels, arr)
    assert back.spacing == vol.spacing


def test_nifti_matches_third_party_reader(tmp_path):
    nib = pytest.importorskip("nibabel")
    vol = VolumeImage(ramp((4, 4, 4)), (1.0, 2.0, 3.0))
    write_volume(vol, tmp_path / "f.nii")
    img = nib.load(str(tmp_path / "f.nii"))
    # nibabel indexes (i, j, k) = (sagittal, coronal, axial)
    np.testing.assert_array_equal(np.asarray(img.dataobj).transpose(2, 1, 0), vol.voxels)
    assert img.header.get_zooms()[:3] == (3.0, 2.0, 1.0)


def test_analyze_matches_third_party_reader(tmp_path):
    nib = pytest.importorskip("nibabel")
    vol = VolumeImage(ramp((2, 3, 5), np.float32) / 7, (1.0, 1.0, 2.5))
    write_volume(vol, tmp_path / "f.hdr")
    img = nib.AnalyzeImage.from_filename(str(tmp_path / "f.hdr"))
    np.testing.assert_array_equal(np.asarray(img.dataobj).transpose(2, 1, 0), vol.voxels)
    assert img.header.get_zooms()[:3] == (2.5, 1.0, 1.0)


def test_reads_nifti_written_by_third_party(tmp_path):
    nib = pytest.importorskip("nibabel")
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)  # (i, j, k)
    img = nib.Nifti1Image(data, np.diag([0.5, 0.75, 2.0, 1.0]))
    nib.save(img, str(tmp_path / "ext.nii"))
    vol = read_volume(tmp_path / "ext.nii")
    np.testing.assert_array_equal(vol.voxels, data.transpose(2, 1, 0))
    assert vol.spacing == (2.0, 0.75, 0.5)


def test_metaimage_matches_third_party_reader(tmp_path):
    sitk = pytest.importorskip("SimpleITK")
    vol = VolumeImage(ramp((3, 4, 5), np.float32) * 0.5, (1.0, 2.0, 0.5))
    write_volume(vol, tmp_path / "f.mha")
    img = sitk.ReadImage(str(tmp_path / "f.mha"))
    # SimpleITK arrays come back as (z, y, x), the same order as ours
    np.testing.assert_array_equal(sitk.GetArrayFromImage(img), vol.voxels)
    assert img.GetSpacing() == (0.5, 2.0, 1.0)


def test_reads_metaimage_written_by_third_party(tmp_path):
    sitk = pytest.importorskip("SimpleITK")
    arr = np.arange(60, dtype=np.int16).reshape(3, 4, 5)
    img = sitk.GetImageFromArray(arr)
    img.SetSpacing((0.25, 0.5, 3.0))
    sitk.WriteImage(img, str(tmp_path / "ext.mha"))
    vol = read_volume(tmp_path / "ext.mha")
    np.testing.assert_array_equal(vol.voxels, arr)
    assert vol.spacing == (3.0, 0.5, 0.25)


def _hand_mha(values, dims, etype, fmt, msb=False):
    header = (
        "ObjectType = Image\nNDims = 3\nBinaryData = True\n"
        f"BinaryDataByteOrderMSB = {msb}\nElementSpacing = 0.5 1 2\n"
        f"DimSize = {dims[0]} {dims[1]} {dims[2]}\nElementType = {etype}\n"
        "ElementDataFile = LOCAL\n"
    ).encode()
    order = ">" if msb else "<"
    return header + struct.pack(f"{order}{len(values)}{fmt}", *values)


@pytest.mark.parametrize(
    "etype,fmt,msb",
    [("MET_UCHAR", "B", False), ("MET_SHORT", "h", False), ("MET_SHORT", "h", True), ("MET_FLOAT", "f", False)],
)
def test_reads_hand_built_metaimage(tmp_path, etype, fmt, msb):
    # x fastest: DimSize 2 3 4 means sagittal=2, coronal=3, axial=4
    values = list(range(24))
    (tmp_path / "h.mha").write_bytes(_hand_mha(values, (2, 3, 4), etype, fmt, msb))
    vol = read_volume(tmp_path / "h.mha")
    assert vol.shape == (4, 3, 2)
    assert vol.spacing == (2.0, 1.0, 0.5)
    assert vol.voxels[1, 2, 0] == 1 * 6 + 2 * 2 + 0
    np.testing.assert_array_equal(vol.voxels.reshape(-1), values)


def test_unknown_extension():
    with pytest.raises(UnknownFormat):
        read_volume("x.txt")
    with pytest.raises(UnknownFormat):
        read_volume("x.nii", format_hint="dicom")


def test_format_hint_overrides_extension(tmp_path):
    vol = VolumeImage(ramp((2, 2, 2)))
    write_volume(vol, tmp_path / "v.bin", format="mha")
    np.testing.assert_array_equal(read_volume(tmp_path / "v.bin", format_hint="mha").voxels, vol.voxels)


@pytest.mark.parametrize("fmt", ["nifti", "mha", "analyze"])
def test_payload_shorter_than_header_declares(tmp_path, fmt):
    vol = VolumeImage(np.zeros((10, 10, 10), dtype=np.uint8))
    path = tmp_path / f"c.{EXT[fmt]}"
    write_volume(vol, path)
    data_file = path.with_suffix(".img") if fmt == "analyze" else path
    raw = data_file.read_bytes()
    data_file.write_bytes(raw[: len(raw) - 500])  # 500 of 1000 voxels remain
    with pytest.raises(CorruptHeader):
        read_volume(path)


def test_non_finite_payload_rejected(tmp_path):
    path = tmp_path / "n.nii"
    write_volume(VolumeImage(np.zeros((2, 2, 2), dtype=np.float32)), path)
    raw = bytearray(path.read_bytes())
    raw[352:356] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(raw))
    with pytest.raises(NonFiniteData):
        read_volume(path)


def test_write_to_unwritable_path(tmp_path):
    with pytest.raises(IoFailure):
        write_volume(VolumeImage(np.zeros((1, 1, 1))), tmp_path / "missing" / "v.nii")


def test_volume_invariants():
    with pytest.raises(NonFiniteData):
        VolumeImage(np.full((2, 2, 2), np.inf))
    with pytest.raises(ValueError):
        VolumeImage(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ShapeMismatch):
        VolumeImage(np.zeros((2, 2)))


def test_extract_slice_axial_example():
    vol = VolumeImage(np.random.default_rng(0).random((3, 4, 5)))
    s = extract_slice(vol, Plane.AXIAL, 1)
    assert s.pixels.shape == (4, 5, 1)
    assert s.channel_tags == (Plane.AXIAL,)
    np.testing.assert_array_equal(s.pixels[:, :, 0], vol.voxels[1, :, :])
    s.pixels[0, 0, 0] = -1
    assert vol.voxels[1, 0, 0] != -1


def test_extract_slice_exhaustive_up_to_8():
    rng = np.random.default_rng(1)
    for shape in itertools.product(range(1, 9), repeat=3):
        vol = VolumeImage(rng.random(shape))
        for plane in Plane:
            for i in range(shape[plane.axis]):
                expected = {0: lambda: vol.voxels[i, :, :], 1: lambda: vol.voxels[:, i, :], 2: lambda: vol.voxels[:, :, i]}[plane.axis]()
                np.testing.assert_array_equal(extract_slice(vol, plane, i).pixels[:, :, 0], expected)


def test_extract_slice_bounds_and_constancy():
    vol = VolumeImage(np.full((3, 4, 5), 2.5))
    with pytest.raises(IndexOutOfRange):
        extract_slice(vol, Plane.SAGITTAL, 5)
    with pytest.raises(IndexOutOfRange):
        extract_slice(vol, Plane.AXIAL, -1)
    assert np.all(extract_slice(vol, "coronal", 3).pixels == 2.5)


def test_extract_voi_examples():
    vol = VolumeImage(ramp(), (1.0, 2.0, 3.0), Modality.T1)
    full = extract_voi(vol, VoiSpec.full(vol.shape))
    np.testing.assert_array_equal(full.voxels, vol.voxels)
    block = extract_voi(vol, VoiSpec((1, 1, 1), (3, 3, 3)))
    np.testing.assert_array_equal(block.voxels, vol.voxels[1:3, 1:3, 1:3])
    assert block.spacing == vol.spacing and block.modality == Modality.T1
    with pytest.raises(VoiOutOfBounds):
        extract_voi(vol, VoiSpec((0, 0, 0), (5, 4, 4)))
    with pytest.raises(VoiOutOfBounds):
        VoiSpec((2, 0, 0), (2, 4, 4))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_voi_composition(data):
    shape = tuple(data.draw(st.integers(1, 7)) for _ in range(3))
    lo = [data.draw(st.integers(0, s - 1)) for s in shape]
    hi = [data.draw(st.integers(l + 1, s)) for l, s in zip(lo, shape)]
    outer = VoiSpec(tuple(lo), tuple(hi))
    ilo = [data.draw(st.integers(0, s - 1)) for s in outer.shape]
    ihi = [data.draw(st.integers(l + 1, s)) for l, s in zip(ilo, outer.shape)]
    inner = VoiSpec(tuple(ilo), tuple(ihi))
    vol = VolumeImage(np.arange(np.prod(shape)).reshape(shape))
    twice = extract_voi(extract_voi(vol, outer), inner)
    np.testing.assert_array_equal(twice.voxels, extract_voi(vol, outer.compose(inner)).voxels)


def test_plane_triplet_constant_and_channel_order():
    vol = VolumeImage(np.full((5, 5, 5), 3.0))
    t = plane_triplet(vol, side=16)
    assert t.channel_tags == (Plane.AXIAL, Plane.CORONAL, Plane.SAGITTAL)
    assert t.pixels.shape == (16, 16, 3)
    np.testing.assert_allclose(t.pixels, 3.0, rtol=0, atol=1e-15)


def test_plane_triplet_native_size_equals_centre_slices():
    vol = VolumeImage(np.random.default_rng(2).random((6, 6, 6)))
    voi = VoiSpec((1, 1, 1), (5, 5, 5))
    t = plane_triplet(vol, voi, side=4)
    crop = vol.voxels[1:5, 1:5, 1:5]
    np.testing.assert_array_equal(t.pixels[:, :, 0], crop[2, :, :])
    np.testing.assert_array_equal(t.pixels[:, :, 1], crop[:, 2, :])
    np.testing.assert_array_equal(t.pixels[:, :, 2], crop[:, :, 2])


def test_plane_triplet_degenerate_voi():
    vol = VolumeImage(ramp((3, 3, 3), np.float64))
    t = plane_triplet(vol, VoiSpec((1, 1, 1), (2, 2, 2)), side=8)
    assert t.pixels.shape == (8, 8, 3)
    np.testing.assert_array_equal(t.pixels, vol.voxels[1, 1, 1])


def _mod_slice(mod, value, shape=(4, 5), subject="s", index=2):
    vol = VolumeImage(np.full((3,) + shape, value), modality=mod, subject_id=subject)
    return extract_slice(vol, Plane.AXIAL, index)


def test_stack_modalities_canonical_order():
    a = stack_modalities([_mod_slice(Modality.T1, 1.0), _mod_slice(Modality.FLAIR, 2.0)])
    b = stack_modalities([_mod_slice(Modality.FLAIR, 2.0), _mod_slice(Modality.T1, 1.0)])
    assert a.channel_tags == b.channel_tags == (Modality.T1, Modality.FLAIR)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert a.pixels[0, 0, 1] == 2.0


def test_stack_modalities_any_permutation():
    mods = [Modality.T1, Modality.T1c, Modality.T2, Modality.FLAIR]
    slices = [_mod_slice(m, float(i)) for i, m in enumerate(mods)]
    ref = stack_modalities(slices)
    for perm in itertools.permutations(slices):
        out = stack_modalities(list(perm))
        np.testing.assert_array_equal(out.pixels, ref.pixels)
        assert out.channel_tags == tuple(mods)


def test_stack_modalities_errors():
    single = _mod_slice(Modality.T2, 4.0)
    out = stack_modalities([single])
    np.testing.assert_array_equal(out.pixels, single.pixels)
    with pytest.raises(ShapeMismatch):
        stack_modalities([_mod_slice(Modality.T1, 0.0), _mod_slice(Modality.T2, 0.0, shape=(5, 5))])
    with pytest.raises(DuplicateModality):
        stack_modalities([_mod_slice(Modality.T1, 0.0), _mod_slice(Modality.T1, 1.0)])
    with pytest.raises(ProvenanceMismatch):
        stack_modalities([_mod_slice(Modality.T1, 0.0), _mod_slice(Modality.T2, 0.0, subject="other")])
    with pytest.raises(ProvenanceMismatch):
        stack_modalities([_mod_slice(Modality.T1, 0.0), _mod_slice(Modality.T2, 0.0, index=1)])


def test_slice_stack_invariants():
    with pytest.raises(ShapeMismatch):
        SliceStack(np.zeros((2, 2, 7)), tuple(Modality) + (Plane.AXIAL,))
    with pytest.raises(ShapeMismatch):
        SliceStack(np.zeros((2, 2, 2)), (Modality.T1, Plane.AXIAL))
    with pytest.raises(DuplicateModality):
        SliceStack(np.zeros((2, 2, 2)), (Modality.T1, Modality.T1))


def test_normalize_intensity():
    vol = VolumeImage(np.array([[[2.0, 4.0], [6.0, 10.0]]]))
    n = normalize_intensity(vol)
    np.testing.assert_array_equal(n.voxels.reshape(-1), [0.0, 0.25, 0.5, 1.0])
    assert n.normalized
    assert np.all(normalize_intensity(VolumeImage(np.ones((2, 2, 2)))).voxels == 0)


@pytest.mark.parametrize("shape,out", [((2, 2), (4, 4)), ((3, 5), (7, 2)), ((4, 4), (4, 4)), ((1, 1), (3, 3))])
def test_resize_matches_torch_bilinear(shape, out):
    img = np.random.default_rng(3).random(shape)
    ref = F.interpolate(torch.from_numpy(img)[None, None], size=out, mode="bilinear", align_corners=False)
    np.testing.assert_allclose(resize_bilinear(img, *out), ref[0, 0].numpy(), atol=1e-12)


def test_manifest_round_trip(tmp_path):
    rows = [
        ManifestRow("s1", "s1_T1.nii", "T1", "axial", "Healthy", "train"),
        ManifestRow("s2", "sub dir/s2, flair.nii", "FLAIR", "", "TumorHGG", "test"),
    ]
    write_manifest(rows, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "subject_id,path,modality,plane_hint,label,split"
    assert read_manifest(tmp_path / "m.csv") == rows
