import gzip
import io

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gliomaseg.errors import (
    BadHeader,
    BadLabelValue,
    BadMagic,
    MissingModality,
    NiftiError,
    NonFiniteVoxel,
    ShapeMismatch,
    TruncatedData,
    UnsupportedDatatype,
)
from gliomaseg.volume_io import (
    MODALITIES,
    MultimodalCase,
    Region,
    VoxelGrid,
    derive_region_mask,
    list_cases,
    load_case,
    load_nifti,
    parse_nifti,
    save_case,
    save_nifti,
    validate_labels,
    write_nifti,
)

DTYPES = [np.uint8, np.int16, np.float32]


def _random_grid(rng, dtype, dims=None):
    dims = dims or tuple(int(d) for d in rng.integers(1, 9, 3))
    if dtype == np.float32:
        vals = rng.normal(0, 100, dims).astype(np.float32)
    else:
        info = np.iinfo(dtype)
        vals = rng.integers(info.min, info.max, dims, endpoint=True).astype(dtype)
    spacing = tuple(float(s) for s in rng.uniform(0.5, 3.0, 3).astype(np.float32))
    return VoxelGrid.from_array(vals, spacing=spacing)


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("gz", [False, True])
def test_roundtrip_bit_exact(rng, dtype, gz):
    g = _random_grid(rng, dtype)
    back = parse_nifti(write_nifti(g, gzip_output=gz))
    assert back.values.dtype == g.values.dtype
    assert back.values.tobytes() == g.values.tobytes()
    assert back.spacing == g.spacing


def test_written_file_matches_nibabel(rng, tmp_path):
    vals = rng.normal(size=(5, 6, 7)).astype(np.float32)
    g = VoxelGrid.from_array(vals, spacing=(1.0, 2.0, 3.0))
    p = save_nifti(g, tmp_path / "a.nii.gz")
    img = nib.load(str(p))
    assert img.shape == (5, 6, 7)
    np.testing.assert_array_equal(np.asarray(img.dataobj), vals)
    assert tuple(float(z) for z in img.header.get_zooms()) == (1.0, 2.0, 3.0)
    # x fastest on disk
    raw = gzip.decompress(p.read_bytes())[352:]
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4")[:5], vals[:, 0, 0])


@pytest.mark.parametrize("dtype", DTYPES)
def test_reads_nibabel_files(rng, tmp_path, dtype):
    g = _random_grid(rng, dtype, (4, 3, 5))
    img = nib.Nifti1Image(g.values, np.diag([2.0, 2.0, 2.0, 1.0]))
    path = tmp_path / "n.nii"
    nib.save(img, str(path))
    back = load_nifti(path)
    np.testing.assert_array_equal(back.values, g.values)
    assert back.spacing == (2.0, 2.0, 2.0)


def test_big_endian_and_scaling(tmp_path):
    vals = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    hdr = nib.Nifti1Header(endianness=">")
    img = nib.Nifti1Image(vals, np.eye(4), header=hdr)
    img.header.set_data_dtype(np.int16)
    img.header.set_slope_inter(0.5, 10.0)
    bio = io.BytesIO()
    file_map = img.make_file_map({"image": bio, "header": bio})
    img.to_file_map(file_map)
    data = bio.getvalue()
    assert data[:4] == (348).to_bytes(4, "big")
    g = parse_nifti(data)
    ref = np.asarray(nib.Nifti1Image.from_bytes(data).get_fdata(), dtype=np.float32)
    np.testing.assert_allclose(g.values, ref)
    assert g.values.dtype == np.float32


def _valid_bytes():
    return write_nifti(VoxelGrid.from_array(np.ones((2, 2, 2), np.float32)))


def _patch(data, offset, fmt, value):
    buf = bytearray(data)
    buf[offset:offset + np.dtype(fmt).itemsize] = np.array(value, dtype=fmt).tobytes()
    return bytes(buf)


@pytest.mark.parametrize(
    "mutate, err",
    [
        (lambda d: d[:100], TruncatedData),
        (lambda d: d[:-3], TruncatedData),
        (lambda d: _patch(d, 0, "<i4", 349), BadHeader),
        (lambda d: d[:344] + b"ni1\x00" + d[348:], BadMagic),
        (lambda d: _patch(d, 70, "<i2", 64), UnsupportedDatatype),
        (lambda d: _patch(d, 72, "<i2", 16), BadHeader),  # bitpix mismatch
        (lambda d: _patch(d, 40, "<i2", 9), BadHeader),  # dim[0]
        (lambda d: _patch(d, 42, "<i2", 0), BadHeader),
        (lambda d: _patch(d, 80, "<f4", -1.0), BadHeader),  # pixdim[1]
        (lambda d: _patch(d, 108, "<f4", 10.0), BadHeader),  # vox_offset < 348
        (lambda d: _patch(d, 112, "<f4", np.nan), BadHeader),
        (lambda d: _patch(d, 352, "<f4", np.inf), NonFiniteVoxel),
        (lambda d: gzip.compress(d)[:30], TruncatedData),
    ],
)
def test_malformed_inputs_raise_typed_errors(mutate, err):
    with pytest.raises(err):
        parse_nifti(mutate(_valid_bytes()))


def test_gzip_can_be_refused():
    with pytest.raises(BadHeader):
        parse_nifti(gzip.compress(_valid_bytes()), allow_gzip=False)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 351), st.integers(0, 255)), min_size=1, max_size=8))
def test_header_fuzz_never_crashes(edits):
    buf = bytearray(_valid_bytes())
    for pos, byte in edits:
        buf[pos] = byte
    try:
        g = parse_nifti(bytes(buf))
    except NiftiError:
        return
    assert g.values.ndim == 3


def test_unsupported_numpy_dtype():
    with pytest.raises(UnsupportedDatatype):
        VoxelGrid.from_array(np.zeros((2, 2, 2), dtype=np.complex64))
    with pytest.raises(UnsupportedDatatype):
        VoxelGrid.from_array(np.full((2, 2, 2), 10**6, dtype=np.int64))


def test_label_validation_and_regions():
    lab = np.array([0, 1, 2, 4, 4, 2], dtype=np.uint8).reshape(1, 2, 3)
    assert derive_region_mask(lab, Region.WT).count == 5
    assert derive_region_mask(lab, "TC").count == 3
    assert derive_region_mask(lab, Region.ET).count == 2
    with pytest.raises(BadLabelValue):
        validate_labels(np.array([0, 3]))
    with pytest.raises(BadLabelValue):
        validate_labels(np.array([0.5]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([0, 1, 2, 4]), min_size=1, max_size=64))
def test_region_nesting(labels):
    lab = np.array(labels, dtype=np.uint8).reshape(-1, 1, 1)
    et, tc, wt = (derive_region_mask(lab, r).values for r in ("ET", "TC", "WT"))
    assert not (et & ~tc).any() and not (tc & ~wt).any()


def _case(rng, dims=(4, 4, 4), case_id="C1"):
    grids = {m: VoxelGrid.from_array(rng.normal(size=dims).astype(np.float32)) for m in MODALITIES}
    labels = VoxelGrid.from_array(rng.choice([0, 1, 2, 4], size=dims).astype(np.uint8))
    return MultimodalCase(case_id, labels=labels, **grids)


def test_case_roundtrip_and_listing(rng, tmp_path):
    c = _case(rng)
    save_case(c, tmp_path)
    assert list_cases(tmp_path) == ["C1"]
    back = load_case(tmp_path, "C1")
    for m in MODALITIES:
        assert back.modality(m).equals(c.modality(m))
    assert back.labels.equals(c.labels)


def test_missing_modality(rng, tmp_path):
    c = _case(rng)
    save_case(c, tmp_path)
    (tmp_path / "C1" / "C1_t1ce.nii.gz").unlink()
    with pytest.raises(MissingModality, match="t1ce"):
        load_case(tmp_path, "C1")


def test_case_shape_mismatch(rng):
    grids = {m: VoxelGrid.from_array(np.zeros((4, 4, 4), np.float32)) for m in MODALITIES}
    grids["t2"] = VoxelGrid.from_array(np.zeros((4, 4, 5), np.float32))
    with pytest.raises(ShapeMismatch):
        MultimodalCase("X", **grids)
