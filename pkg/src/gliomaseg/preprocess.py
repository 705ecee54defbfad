"""Intensity preprocessing: brain mask, bias correction, histogram matching,
z-scoring, and the resolution changes feeding the two network paths.

Statistics are always taken over the brain mask of one modality of one case.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._grid_ops import downsample2, upsample2
from .errors import (
    BadConfig,
    DegenerateHistogram,
    EmptyMask,
    SingularFit,
    ZeroVariance,
)
from .volume_io import MODALITIES, MultimodalCase, VoxelGrid


@dataclass
class PreprocessConfig:
    reference_case: str | None = None  # None -> lexicographically first case id
    bins: int = 256
    bias_degree: int = 3
    steps: tuple = ("bias_correct", "histogram_match", "zscore")

    @classmethod
    def from_mapping(cls, cfg) -> "PreprocessConfig":
        steps = cfg.get("steps")
        return cls(
            reference_case=cfg.get("reference_case") or None,
            bins=int(cfg.get("bins", 256)),
            bias_degree=int(cfg.get("bias_degree", 3)),
            steps=tuple(s.strip() for s in steps.split(",")) if steps else cls.steps,
        )


def _values(grid) -> np.ndarray:
    return grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)


def _mask(mask) -> np.ndarray:
    m = _values(mask).astype(bool)
    if not m.any():
        raise EmptyMask("brain mask is empty")
    return m


def compute_brain_mask(case: MultimodalCase) -> np.ndarray:
    """Voxels whose raw intensity is nonzero in at least one modality."""
    stacked = np.stack([np.abs(g.values) for g in case.grids()])
    mask = stacked.max(axis=0) > 0
    if not mask.any():
        raise EmptyMask(f"{case.case_id}: no nonzero voxel in any modality")
    return mask


def zscore_normalize(grid: VoxelGrid, mask) -> VoxelGrid:
    m = _mask(mask)
    vals = grid.values.astype(np.float64)
    inside = vals[m]
    mean = inside.mean()
    std = inside.std()  # population std
    if not std > 0:
        raise ZeroVariance("masked intensities are constant")
    out = np.zeros_like(vals)
    out[m] = (inside - mean) / std
    return grid.with_values(out)


# ---------------------------------------------------------------------------
# histogram matching


@dataclass
class HistogramMapping:
    """Monotone intensity map from a source to a reference distribution.

    Voxel values are mapped through the source's mid-rank empirical CDF and the
    reference's interpolated quantile function; ``source_cdf``,
    ``reference_cdf`` and ``lookup`` summarize the map at ``bins`` resolution.
    """

    bins: int
    edges: np.ndarray  # bins + 1 edges spanning the source masked range
    source_cdf: np.ndarray
    reference_edges: np.ndarray
    reference_cdf: np.ndarray
    lookup: np.ndarray  # target intensity at each source bin centre
    knots_x: np.ndarray = field(repr=False)  # unique source values
    knots_u: np.ndarray = field(repr=False)  # their mid-rank CDF positions
    reference_sorted: np.ndarray = field(repr=False)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        ref = self.reference_sorted
        pos = np.clip(np.asarray(u) * ref.size - 0.5, 0, ref.size - 1)
        return np.interp(pos, np.arange(ref.size), ref)

    def apply(self, values: np.ndarray) -> np.ndarray:
        u = np.interp(values, self.knots_x, self.knots_u)
        return self.quantile(u)


def _cdf(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    hist, _ = np.histogram(values, bins=edges)
    cdf = np.cumsum(hist, dtype=np.float64)
    return cdf / cdf[-1]


def fit_histogram_mapping(source: np.ndarray, reference: np.ndarray, bins: int = 256) -> HistogramMapping:
    source = np.asarray(source, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    if source.size == 0 or reference.size == 0:
        raise EmptyMask("histogram matching needs nonempty masks")
    lo, hi = source.min(), source.max()
    if not hi > lo:
        raise DegenerateHistogram("all source intensity falls in one bin")
    edges = np.linspace(lo, hi, bins + 1)
    src_hist, _ = np.histogram(source, bins=edges)
    if np.count_nonzero(src_hist) < 2:
        raise DegenerateHistogram("all source intensity falls in one bin")

    uniq, counts = np.unique(source, return_counts=True)
    # mid-rank: a tie group occupying sorted positions [a, a+k) sits at (a + k/2) / n
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    knots_u = (starts + counts / 2.0) / source.size

    r_lo, r_hi = reference.min(), reference.max()
    r_edges = np.linspace(r_lo, r_hi if r_hi > r_lo else r_lo + 1.0, bins + 1)
    mapping = HistogramMapping(
        bins=bins,
        edges=edges,
        source_cdf=src_hist.cumsum() / source.size,
        reference_edges=r_edges,
        reference_cdf=_cdf(reference, r_edges),
        lookup=np.empty(bins),
        knots_x=uniq,
        knots_u=knots_u,
        reference_sorted=np.sort(reference),
    )
    mapping.lookup = mapping.apply(0.5 * (edges[1:] + edges[:-1]))
    return mapping


def histogram_match(source: VoxelGrid, reference: VoxelGrid, mask_s, mask_r, bins: int = 256) -> VoxelGrid:
    ms, mr = _mask(mask_s), _mask(mask_r)
    src = source.values.astype(np.float64)
    mapping = fit_histogram_mapping(src[ms], reference.values[mr], bins)
    out = np.zeros_like(src)
    out[ms] = mapping.apply(src[ms])
    return source.with_values(out)


def ks_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic between empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


# ---------------------------------------------------------------------------
# bias field


def polynomial_exponents(degree: int) -> list[tuple[int, int, int]]:
    """Monomial exponents (i, j, k) with i + j + k <= degree, graded order."""
    return [
        e
        for total in range(degree + 1)
        for e in itertools.product(range(total + 1), repeat=3)
        if sum(e) == total
    ]


def normalized_coords(dims) -> list[np.ndarray]:
    """Per-axis voxel coordinates rescaled to [-1, 1] (broadcastable)."""
    out = []
    for axis, n in enumerate(dims):
        c = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
        shape = [1, 1, 1]
        shape[axis] = n
        out.append(c.reshape(shape))
    return out


def evaluate_polynomial(dims, exponents, coeffs) -> np.ndarray:
    x, y, z = normalized_coords(dims)
    field_ = np.zeros(dims)
    for (i, j, k), c in zip(exponents, coeffs):
        field_ = field_ + c * (x**i * y**j * z**k)
    return field_


def bias_correct(grid: VoxelGrid, mask, degree: int = 3) -> VoxelGrid:
    """Divide out a smooth multiplicative field fitted in the log domain.

    A total-degree polynomial is least-squares fitted to log intensity over the
    mask and re-centred so the masked geometric mean is unchanged.
    """
    if degree not in (1, 2, 3):
        raise BadConfig(f"bias degree must be 1, 2 or 3, got {degree}")
    m = _mask(mask)
    vals = grid.values.astype(np.float64)
    shift = 0.0
    lo = vals[m].min()
    if lo <= 0:
        shift = 1.0 - lo
    logv = np.log(vals[m] + shift)

    exps = polynomial_exponents(degree)
    idx = np.nonzero(m)
    x, y, z = (c.ravel() for c in normalized_coords(grid.dims))
    xs, ys, zs = x[idx[0]], y[idx[1]], z[idx[2]]
    design = np.stack([xs**i * ys**j * zs**k for i, j, k in exps], axis=1)
    coeffs, _, rank, _ = np.linalg.lstsq(design, logv, rcond=None)
    if rank < len(exps):
        raise SingularFit(f"design matrix rank {rank} < {len(exps)} terms")

    log_field = evaluate_polynomial(grid.dims, exps, coeffs)
    log_field -= log_field[m].mean()
    out = (vals + shift) / np.exp(log_field) - shift
    out[~m] = vals[~m]
    return grid.with_values(out)


def masked_cv(values: np.ndarray, mask) -> float:
    v = np.asarray(values, dtype=np.float64)[_mask(mask)]
    return float(v.std() / abs(v.mean()))


# ---------------------------------------------------------------------------
# resolution changes


def resample(grid: VoxelGrid, factor: str) -> VoxelGrid:
    if factor == "down2":
        vals = downsample2(grid.values.astype(np.float64))
        spacing = tuple(s * 2 for s in grid.spacing)
    elif factor == "up2":
        vals = upsample2(grid.values.astype(np.float64))
        spacing = tuple(s / 2 for s in grid.spacing)
    else:
        raise BadConfig(f"factor must be 'down2' or 'up2', got {factor!r}")
    return grid.with_values(vals, spacing=spacing)


@dataclass(frozen=True)
class CropPadRecord:
    """Per-axis placement of the original grid inside the target grid."""

    original_dims: tuple[int, int, int]
    target_dims: tuple[int, int, int]
    src_start: tuple[int, int, int]
    dst_start: tuple[int, int, int]
    length: tuple[int, int, int]

    def _slices(self):
        src = tuple(slice(s, s + n) for s, n in zip(self.src_start, self.length))
        dst = tuple(slice(s, s + n) for s, n in zip(self.dst_start, self.length))
        return src, dst

    def forward(self, values: np.ndarray, fill=0) -> np.ndarray:
        src, dst = self._slices()
        lead = values.shape[:-3]
        out = np.full(lead + tuple(self.target_dims), fill, dtype=values.dtype)
        out[(...,) + dst] = values[(...,) + src]
        return out

    def inverse(self, values: np.ndarray, fill=0) -> np.ndarray:
        src, dst = self._slices()
        lead = values.shape[:-3]
        out = np.full(lead + tuple(self.original_dims), fill, dtype=values.dtype)
        out[(...,) + src] = values[(...,) + dst]
        return out


def plan_crop_pad(dims, target_dims) -> CropPadRecord:
    src, dst, length = [], [], []
    for n, t in zip(dims, target_dims):
        if n >= t:
            src.append((n - t) // 2)
            dst.append(0)
            length.append(t)
        else:
            src.append(0)
            dst.append((t - n) // 2)
            length.append(n)
    return CropPadRecord(tuple(dims), tuple(target_dims), tuple(src), tuple(dst), tuple(length))


def crop_pad_to_shape(grid: VoxelGrid, target_dims) -> tuple[VoxelGrid, CropPadRecord]:
    rec = plan_crop_pad(grid.dims, tuple(int(t) for t in target_dims))
    return grid.with_values(rec.forward(grid.values)), rec


# ---------------------------------------------------------------------------
# case-level chain


@dataclass
class ReferenceStats:
    case_id: str
    grids: dict  # modality -> bias-corrected VoxelGrid
    mask: np.ndarray


def prepare_reference(case: MultimodalCase, cfg: PreprocessConfig) -> ReferenceStats:
    mask = compute_brain_mask(case)
    grids = {}
    for m in MODALITIES:
        g = case.modality(m)
        if "bias_correct" in cfg.steps:
            g = bias_correct(g, mask, cfg.bias_degree)
        grids[m] = g
    return ReferenceStats(case.case_id, grids, mask)


def preprocess_case(case: MultimodalCase, reference: ReferenceStats | None,
                    cfg: PreprocessConfig) -> tuple[MultimodalCase, dict]:
    """Apply bias correction, histogram matching and z-scoring per modality.

    Returns the processed case (float32 volumes, background 0) and a
    provenance dict describing what was applied.
    """
    mask = compute_brain_mask(case)
    out = {}
    for m in MODALITIES:
        g = case.modality(m)
        if "bias_correct" in cfg.steps:
            g = bias_correct(g, mask, cfg.bias_degree)
        if "histogram_match" in cfg.steps and reference is not None:
            g = histogram_match(g, reference.grids[m], mask, reference.mask, cfg.bins)
        if "zscore" in cfg.steps:
            g = zscore_normalize(g, mask)
        out[m] = g.with_values(g.values.astype(np.float32))
    processed = case.replace_modalities(out)
    provenance = {
        "case_id": case.case_id,
        "steps": list(cfg.steps),
        "bias_degree": cfg.bias_degree,
        "bins": cfg.bins,
        "reference_case": reference.case_id if reference is not None else None,
        "brain_voxels": int(mask.sum()),
    }
    return processed, provenance


def write_provenance(path, provenance: dict, cfg: PreprocessConfig | None = None) -> Path:
    path = Path(path)
    record = dict(provenance)
    if cfg is not None:
        record["config"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return path
