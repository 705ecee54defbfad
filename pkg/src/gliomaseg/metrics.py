"""Segmentation overlap / surface-distance metrics and survival error statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .errors import DegenerateRanks, LengthMismatch, ShapeMismatch
from .volume_io import Region, derive_region_mask

HD95_SENTINEL = 373.13  # mm, reported when exactly one mask is empty
REGIONS = (Region.ET, Region.WT, Region.TC)

_SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _as_bool(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "values", mask)).astype(bool)


def confusion_counts(pred, truth) -> tuple[int, int, int, int]:
    p, t = _as_bool(pred), _as_bool(truth)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs truth {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = p.size - tp - fp - fn
    return tp, fp, fn, tn


def overlap_metrics(pred, truth) -> tuple[float, float, float]:
    """(dice, sensitivity, specificity).

    Empty denominators count as perfect: two empty masks have Dice 1, an
    empty truth has sensitivity 1, a full truth has specificity 1.
    """
    tp, fp, fn, tn = confusion_counts(pred, truth)
    dice_den = 2 * tp + fp + fn
    dice = 1.0 if dice_den == 0 else 2 * tp / dice_den
    sens = 1.0 if tp + fn == 0 else tp / (tp + fn)
    spec = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return dice, sens, spec


def surface_voxels(mask) -> np.ndarray:
    """Mask voxels with at least one 6-connected background neighbour.

    Voxels outside the grid count as background.
    """
    m = _as_bool(mask)
    padded = np.pad(m, 1, constant_values=False)
    eroded = ndimage.binary_erosion(padded, structure=_SIX_NEIGHBOURS)[1:-1, 1:-1, 1:-1]
    return m & ~eroded


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    s = np.asarray(spacing, dtype=np.float64)
    tree = cKDTree(dst * s)
    _, nearest = tree.query(src * s)
    # recompute with the plain formula so the value does not depend on the tree's arithmetic
    diff = (src - dst[nearest]) * s
    return np.sqrt((diff * diff).sum(axis=1))


def hausdorff95(pred, truth, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile surface distance in mm.

    Both empty -> 0; exactly one empty -> ``HD95_SENTINEL``.
    """
    p, t = _as_bool(pred), _as_bool(truth)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs truth {t.shape}")
    pe, te_ = not p.any(), not t.any()
    if pe and te_:
        return 0.0
    if pe or te_:
        return HD95_SENTINEL
    sp = np.argwhere(surface_voxels(p)).astype(np.float64)
    st = np.argwhere(surface_voxels(t)).astype(np.float64)
    d_pt = _directed_distances(sp, st, spacing)
    d_tp = _directed_distances(st, sp, spacing)
    return max(nearest_rank(d_pt, 95), nearest_rank(d_tp, 95))


def spearman_r(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"lengths {x.shape} and {y.shape} differ")
    if x.size < 2:
        raise LengthMismatch("need at least two observations")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float((rx * rx).sum()) * float((ry * ry).sum()))
    if den == 0:
        raise DegenerateRanks("all values tied in at least one argument")
    return float(np.clip((rx * ry).sum() / den, -1.0, 1.0))


def squared_error_summary(pred_days, true_days) -> tuple[float, float, float]:
    """(mean, median, population std) of squared errors."""
    p = np.asarray(pred_days, dtype=np.float64)
    t = np.asarray(true_days, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise LengthMismatch(f"lengths {p.shape} and {t.shape} differ")
    if p.size < 1:
        raise LengthMismatch("need at least one prediction")
    se = (p - t) ** 2
    return float(se.mean()), float(np.median(se)), float(se.std())


@dataclass
class RegionScores:
    dice: float
    sensitivity: float
    specificity: float
    hd95: float
    hd95_sentinel: bool = False


@dataclass
class OverlapReport:
    case_id: str
    regions: dict  # Region value -> RegionScores

    def rows(self) -> list[dict]:
        return [
            {"case_id": self.case_id, "region": r, **asdict(s)} for r, s in self.regions.items()
        ]


def evaluate_case(pred, truth, spacing=(1.0, 1.0, 1.0), case_id: str = "") -> OverlapReport:
    pv = np.asarray(getattr(pred, "values", pred))
    tv = np.asarray(getattr(truth, "values", truth))
    if pv.shape != tv.shape:
        raise ShapeMismatch(f"prediction {pv.shape} vs truth {tv.shape}")
    regions = {}
    for region in REGIONS:
        pm = derive_region_mask(pv, region).values
        tm = derive_region_mask(tv, region).values
        dice, sens, spec = overlap_metrics(pm, tm)
        hd = hausdorff95(pm, tm, spacing)
        regions[region.value] = RegionScores(dice, sens, spec, hd, pm.any() != tm.any())
    return OverlapReport(case_id, regions)


# ---------------------------------------------------------------------------
# reporting

CSV_FIELDS = ["case_id", "region", "dice", "sensitivity", "specificity", "hd95", "hd95_sentinel"]
METRIC_KEYS = ("dice", "sensitivity", "specificity", "hd95")


def write_case_csv(reports: list[OverlapReport], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def read_case_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in METRIC_KEYS:
            r[k] = float(r[k])
        r["hd95_sentinel"] = r["hd95_sentinel"] == "True"
    return rows


def aggregate(rows: list[dict]) -> dict:
    """Mean / std per metric and region, in the layout of the usual challenge table.

    HD95 statistics are given both with and without sentinel rows.
    """
    out = {}
    for metric in METRIC_KEYS:
        out[metric] = {}
        for region in (r.value for r in REGIONS):
            vals = np.array([r[metric] for r in rows if r["region"] == region], dtype=np.float64)
            entry = {
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "std": float(vals.std()) if vals.size else float("nan"),
                "n": int(vals.size),
            }
            if metric == "hd95":
                clean = np.array([r[metric] for r in rows
                                  if r["region"] == region and not r["hd95_sentinel"]])
                entry["mean_excluding_sentinel"] = float(clean.mean()) if clean.size else float("nan")
                entry["sentinel_rows"] = int(vals.size - clean.size)
            out[metric][region] = entry
    return out


def write_aggregate_json(rows: list[dict], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(aggregate(rows), indent=2, sort_keys=True))
    return path
