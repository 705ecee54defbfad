"""NIfTI-1 single-file reader/writer and the multimodal case container.

Only the ``n+1`` variant with uint8, int16 or float32 voxels is handled.
Arrays are indexed ``[x, y, z]``; on disk x varies fastest.
"""

from __future__ import annotations

import gzip
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    BadHeader,
    BadLabelValue,
    BadMagic,
    MissingModality,
    NonFiniteVoxel,
    ShapeMismatch,
    TruncatedData,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag
MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

MODALITIES = ("flair", "t1", "t1ce", "t2")
LABEL_VALUES = (0, 1, 2, 4)

# NIfTI datatype code -> (numpy kind, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    16: ("f4", 32),
}
_CODE_BY_DTYPE = {np.dtype("u1"): 2, np.dtype("i2"): 4, np.dtype("f4"): 16}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern", "f4", (6,)),
    ("srow", "f4", (3, 4)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(endian: str) -> np.dtype:
    fields = []
    for f in _HEADER_FIELDS:
        kind = f[1]
        if kind[0] in "iuf":
            kind = endian + kind
        fields.append((f[0], kind) + tuple(f[2:]))
    dt = np.dtype(fields)
    assert dt.itemsize == HEADER_SIZE
    return dt


class Region(str, Enum):
    WT = "WT"
    TC = "TC"
    ET = "ET"


REGION_LABELS = {
    Region.WT: (1, 2, 4),
    Region.TC: (1, 4),
    Region.ET: (4,),
}


@dataclass(frozen=True)
class NiftiHeader:
    dims: tuple[int, int, int]
    datatype: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    scale_slope: float = 1.0
    scale_intercept: float = 0.0
    endianness: str = "<"
    magic: str = "n+1"
    sform_code: int = 0
    qform_code: int = 0
    affine: tuple = ()  # 3x4 srow rows, flattened; empty means spacing-diagonal
    quatern: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    qfac: float = 1.0

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(DATATYPES[self.datatype][0])

    def srow(self) -> np.ndarray:
        if self.affine:
            return np.asarray(self.affine, dtype=np.float64).reshape(3, 4)
        srow = np.zeros((3, 4))
        srow[[0, 1, 2], [0, 1, 2]] = self.spacing
        return srow


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    header: NiftiHeader
    values: np.ndarray

    def __post_init__(self):
        if tuple(self.values.shape) != tuple(self.header.dims):
            raise ShapeMismatch(
                f"values shape {self.values.shape} != header dims {self.header.dims}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.header.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.header.spacing

    @classmethod
    def from_array(cls, values, spacing=(1.0, 1.0, 1.0), affine=()) -> "VoxelGrid":
        values = np.asarray(values)
        if values.ndim != 3:
            raise ShapeMismatch(f"expected a 3-D array, got shape {values.shape}")
        header = NiftiHeader(
            dims=tuple(int(d) for d in values.shape),
            datatype=_code_for(values),
            spacing=tuple(float(s) for s in spacing),
            affine=tuple(affine),
        )
        return cls(header, values)

    def with_values(self, values, spacing=None) -> "VoxelGrid":
        """Same geometry, new voxel array (dims and datatype follow ``values``)."""
        values = np.asarray(values)
        header = replace(
            self.header,
            dims=tuple(int(d) for d in values.shape),
            datatype=_code_for(values),
            spacing=self.header.spacing if spacing is None else tuple(spacing),
            scale_slope=1.0,
            scale_intercept=0.0,
        )
        if spacing is not None or header.dims != self.header.dims:
            header = replace(header, affine=())
        return VoxelGrid(header, values)

    def equals(self, other: "VoxelGrid") -> bool:
        return (
            self.dims == other.dims
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )


def _code_for(values: np.ndarray) -> int:
    dt = values.dtype
    if dt in _CODE_BY_DTYPE:
        return _CODE_BY_DTYPE[dt]
    if dt == np.bool_:
        return 2
    if np.issubdtype(dt, np.integer):
        if values.size == 0 or (values.min() >= 0 and values.max() <= 255):
            return 2
        if values.min() >= -32768 and values.max() <= 32767:
            return 4
        raise UnsupportedDatatype(f"integer range of {dt} array exceeds int16")
    if np.issubdtype(dt, np.floating):
        return 16
    raise UnsupportedDatatype(f"no NIfTI datatype for numpy dtype {dt}")


def _storage_array(grid: VoxelGrid) -> np.ndarray:
    kind = DATATYPES[grid.header.datatype][0]
    return np.asarray(grid.values).astype("<" + kind, copy=False)


# ---------------------------------------------------------------------------
# parse / write


def parse_nifti(data: bytes, allow_gzip: bool = True) -> VoxelGrid:
    """Decode a single-file NIfTI-1 byte string into a :class:`VoxelGrid`.

    Every malformed input raises a subclass of :class:`NiftiError`.
    """
    data = bytes(data)
    if data[:2] == GZIP_MAGIC:
        if not allow_gzip:
            raise BadHeader("gzip-compressed input but allow_gzip is off")
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError, zlib.error) as exc:
            raise TruncatedData(f"corrupt gzip stream: {exc}") from None
    if len(data) < HEADER_SIZE:
        raise TruncatedData(f"{len(data)} bytes is shorter than a NIfTI-1 header")

    endian = None
    for e in ("<", ">"):
        if int(np.frombuffer(data[:4], dtype=e + "i4")[0]) == HEADER_SIZE:
            endian = e
            break
    if endian is None:
        raise BadHeader("sizeof_hdr is not 348 in either byte order")
    hdr = np.frombuffer(data[:HEADER_SIZE], dtype=_header_dtype(endian))[0]

    if bytes(data[344:348]) != MAGIC:
        raise BadMagic(f"magic {bytes(data[344:348])!r} (only single-file 'n+1' supported)")

    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise BadHeader(f"dim[0]={ndim} out of range")
    full = [dim[i] if i <= ndim else 1 for i in range(1, 8)]
    if any(d < 1 for d in full):
        raise BadHeader(f"non-positive dimension in {dim}")
    if any(d != 1 for d in full[3:]):
        raise BadHeader(f"only 3-D volumes are supported, got dims {dim}")
    dims = tuple(full[:3])

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code}")
    kind, bitpix = DATATYPES[code]
    if int(hdr["bitpix"]) != bitpix:
        raise BadHeader(f"bitpix {int(hdr['bitpix'])} inconsistent with datatype {code}")

    pixdim = [float(p) for p in hdr["pixdim"]]
    spacing = tuple(pixdim[1:4])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise BadHeader(f"spacing {spacing} must be finite and positive")

    offset = float(hdr["vox_offset"])
    if not np.isfinite(offset) or offset < HEADER_SIZE or offset != int(offset):
        raise BadHeader(f"vox_offset {offset} invalid")
    offset = int(offset)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if not (np.isfinite(slope) and np.isfinite(inter)):
        raise BadHeader("non-finite scl_slope / scl_inter")

    n = dims[0] * dims[1] * dims[2]
    nbytes = n * np.dtype(kind).itemsize
    if len(data) < offset + nbytes:
        raise TruncatedData(
            f"payload needs {nbytes} bytes at offset {offset}, file has {len(data) - offset}"
        )
    raw = np.frombuffer(data, dtype=endian + kind, count=n, offset=offset)
    values = raw.reshape(dims[::-1]).transpose(2, 1, 0).astype(kind, order="C")

    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        values = (values.astype(np.float64) * slope + inter).astype(np.float32)
        code = 16
    if values.dtype.kind == "f" and not np.isfinite(values).all():
        raise NonFiniteVoxel(f"{int(np.count_nonzero(~np.isfinite(values)))} non-finite voxels")

    quatern = tuple(float(q) for q in hdr["quatern"])
    srow = np.asarray(hdr["srow"], dtype=np.float64)
    header = NiftiHeader(
        dims=dims,
        datatype=code,
        spacing=spacing,
        scale_slope=1.0,
        scale_intercept=0.0,
        endianness=endian,
        magic="n+1",
        sform_code=int(hdr["sform_code"]),
        qform_code=int(hdr["qform_code"]),
        affine=tuple(srow.ravel().tolist()) if int(hdr["sform_code"]) > 0 else (),
        quatern=quatern,
        qfac=pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0,
    )
    return VoxelGrid(header, values)


def write_nifti(grid: VoxelGrid, gzip_output: bool = False) -> bytes:
    """Encode ``grid`` as little-endian single-file NIfTI-1 (slope 1, intercept 0)."""
    store = _storage_array(grid)
    h = grid.header
    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *h.dims, 1, 1, 1, 1]
    hdr["datatype"] = h.datatype
    hdr["bitpix"] = DATATYPES[h.datatype][1]
    hdr["pixdim"] = [h.qfac, *h.spacing, 0, 0, 0, 0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["qform_code"] = h.qform_code
    hdr["sform_code"] = h.sform_code if h.affine else max(h.sform_code, 1)
    hdr["quatern"] = h.quatern
    hdr["srow"] = h.srow()
    hdr["magic"] = MAGIC
    out = hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + store.tobytes(order="F")
    if gzip_output:
        out = gzip.compress(out, compresslevel=6, mtime=0)
    return out


def load_nifti(path) -> VoxelGrid:
    return parse_nifti(Path(path).read_bytes(), allow_gzip=True)


def save_nifti(grid: VoxelGrid, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_nifti(grid, gzip_output=path.name.endswith(".gz")))
    return path


# ---------------------------------------------------------------------------
# cases and labels


@dataclass(frozen=True, eq=False)
class RegionMask:
    region: Region
    values: np.ndarray  # bool

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.values))


def validate_labels(values: np.ndarray) -> np.ndarray:
    """Return ``values`` as uint8 after checking every voxel is in {0,1,2,4}."""
    values = np.asarray(values)
    if values.dtype.kind == "f":
        if not np.all(values == np.round(values)):
            raise BadLabelValue("label volume contains non-integer values")
    bad = ~np.isin(values, LABEL_VALUES)
    if bad.any():
        found = sorted({float(v) for v in np.unique(values[bad])[:5]})
        raise BadLabelValue(f"label values {found} outside {{0,1,2,4}}")
    return values.astype(np.uint8)


def derive_region_mask(labels, region) -> RegionMask:
    """Binary mask of WT ({1,2,4}), TC ({1,4}) or ET ({4})."""
    region = Region(region)
    values = labels.values if isinstance(labels, VoxelGrid) else np.asarray(labels)
    return RegionMask(region, np.isin(values, REGION_LABELS[region]))


@dataclass(eq=False)
class MultimodalCase:
    case_id: str
    flair: VoxelGrid
    t1: VoxelGrid
    t1ce: VoxelGrid
    t2: VoxelGrid
    labels: VoxelGrid | None = None
    age_days: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        ref = self.flair
        for name in MODALITIES[1:]:
            g = getattr(self, name)
            if g.dims != ref.dims or not np.allclose(g.spacing, ref.spacing):
                raise ShapeMismatch(
                    f"{self.case_id}: {name} grid {g.dims}/{g.spacing} differs from "
                    f"flair {ref.dims}/{ref.spacing}"
                )
        if self.labels is not None:
            if self.labels.dims != ref.dims:
                raise ShapeMismatch(
                    f"{self.case_id}: label dims {self.labels.dims} != image dims {ref.dims}"
                )
            validate_labels(self.labels.values)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.flair.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.flair.spacing

    def modality(self, name: str) -> VoxelGrid:
        return getattr(self, name)

    def grids(self) -> list[VoxelGrid]:
        return [getattr(self, m) for m in MODALITIES]

    def stacked(self, dtype=np.float32) -> np.ndarray:
        """Modalities stacked as a (4, X, Y, Z) array in flair/t1/t1ce/t2 order."""
        return np.stack([g.values.astype(dtype, copy=False) for g in self.grids()])

    def replace_modalities(self, grids: dict) -> "MultimodalCase":
        kw = {m: grids.get(m, getattr(self, m)) for m in MODALITIES}
        return MultimodalCase(self.case_id, labels=self.labels, age_days=self.age_days,
                              extras=dict(self.extras), **kw)


def _find_file(directory: Path, case_id: str, suffix: str) -> Path | None:
    for base in (directory / case_id, directory):
        for ext in (".nii.gz", ".nii"):
            p = base / f"{case_id}_{suffix}{ext}"
            if p.is_file():
                return p
    return None


def case_path(directory, case_id: str, suffix: str) -> Path:
    """Canonical BraTS location ``<dir>/<id>/<id>_<suffix>.nii.gz``."""
    return Path(directory) / case_id / f"{case_id}_{suffix}.nii.gz"


def load_case(directory, case_id: str, age_days: float | None = None) -> MultimodalCase:
    directory = Path(directory)
    grids = {}
    missing = []
    for m in MODALITIES:
        p = _find_file(directory, case_id, m)
        if p is None:
            missing.append(m)
        else:
            grids[m] = load_nifti(p)
    if missing:
        raise MissingModality(f"{case_id}: missing modalities {missing} under {directory}")
    labels = None
    seg = _find_file(directory, case_id, "seg")
    if seg is not None:
        g = load_nifti(seg)
        labels = g.with_values(validate_labels(g.values))
    return MultimodalCase(case_id, labels=labels, age_days=age_days, **grids)


def load_case_volume(directory, case_id: str, suffix: str) -> VoxelGrid | None:
    """Load ``<id>_<suffix>`` from either layout, or None if absent."""
    p = _find_file(Path(directory), case_id, suffix)
    return None if p is None else load_nifti(p)


def save_case(case: MultimodalCase, directory, with_labels: bool = True) -> Path:
    for m in MODALITIES:
        save_nifti(case.modality(m), case_path(directory, case.case_id, m))
    if with_labels and case.labels is not None:
        save_nifti(case.labels, case_path(directory, case.case_id, "seg"))
    return Path(directory) / case.case_id


def list_cases(directory) -> list[str]:
    """Case ids found under ``directory`` (subdirectories holding a flair volume)."""
    directory = Path(directory)
    ids = []
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        if _find_file(directory, sub.name, "flair") is not None:
            ids.append(sub.name)
    return ids
