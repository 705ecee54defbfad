"""Overall-survival prediction from segmentation-derived features."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import forest
from .errors import BadConfig, EmptyBrainMask, NegativeDays, ShapeMismatch, TooFewRecords
from .metrics import spearman_r, squared_error_summary
from .volume_io import MODALITIES, MultimodalCase

DAYS_PER_MONTH = 30.4375
SHORT_LIMIT = 10 * DAYS_PER_MONTH  # 304.375
LONG_LIMIT = 15 * DAYS_PER_MONTH  # 456.5625
CLASSES = ("short", "medium", "long")

TISSUE_NAMES = {1: "necrotic", 2: "edema", 4: "enhancing"}
VOLUME_COLUMNS = ["norm_vol_wt", "norm_vol_tc", "norm_vol_et"]
INTENSITY_COLUMNS = [f"mean_{TISSUE_NAMES[t]}_{m}" for t in (1, 2, 4) for m in MODALITIES]
FEATURE_COLUMNS = VOLUME_COLUMNS + INTENSITY_COLUMNS
FLAG_COLUMNS = [f"has_{TISSUE_NAMES[t]}" for t in (1, 2, 4)]
MIN_TRAIN_RECORDS = 10


@dataclass
class SurvivalFeatures:
    norm_vol_wt: float
    norm_vol_tc: float
    norm_vol_et: float
    mean_intensity: dict  # tissue label -> {modality: mean}
    present: dict  # tissue label -> bool

    def vector(self) -> np.ndarray:
        vals = [self.norm_vol_wt, self.norm_vol_tc, self.norm_vol_et]
        vals += [self.mean_intensity[t][m] for t in (1, 2, 4) for m in MODALITIES]
        return np.array(vals, dtype=np.float64)

    def flags(self) -> list[bool]:
        return [bool(self.present[t]) for t in (1, 2, 4)]


@dataclass
class SurvivalRecord:
    case_id: str
    features: SurvivalFeatures | None = None
    true_days: float | None = None
    predicted_days: float | None = None
    predicted_class: str | None = None


@dataclass
class SurvivalReport:
    accuracy: float
    mse: float
    median_se: float
    std_se: float
    spearman_r: float
    n: int = 0
    confusion: dict = field(default_factory=dict)


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x))


def extract_features(case: MultimodalCase, labels, brain) -> SurvivalFeatures:
    """Volume fractions of WT/TC/ET and per-tissue mean intensity in every modality."""
    lab = _arr(labels)
    br = _arr(brain).astype(bool)
    if lab.shape != case.dims or br.shape != case.dims:
        raise ShapeMismatch(f"labels {lab.shape} / brain {br.shape} vs case {case.dims}")
    n_brain = int(br.sum())
    if n_brain == 0:
        raise EmptyBrainMask(f"{case.case_id}: brain mask has no voxels")
    wt = int(np.isin(lab, (1, 2, 4)).sum())
    tc = int(np.isin(lab, (1, 4)).sum())
    et = int((lab == 4).sum())
    means, present = {}, {}
    for t in (1, 2, 4):
        sel = lab == t
        present[t] = bool(sel.any())
        means[t] = {
            m: float(case.modality(m).values[sel].mean(dtype=np.float64)) if present[t] else 0.0
            for m in MODALITIES
        }
    return SurvivalFeatures(wt / n_brain, tc / n_brain, et / n_brain, means, present)


def bucketize_days(days: float) -> str:
    if days < 0:
        raise NegativeDays(f"survival days must be >= 0, got {days}")
    if days < SHORT_LIMIT:
        return "short"
    if days > LONG_LIMIT:
        return "long"
    return "medium"


def bucket_accuracy(pred_days, true_days) -> float:
    p = [bucketize_days(max(float(d), 0.0)) for d in pred_days]
    t = [bucketize_days(float(d)) for d in true_days]
    return float(np.mean([a == b for a, b in zip(p, t)]))


def feature_matrix(records: list[SurvivalRecord], columns=None) -> np.ndarray:
    """Rows of the 15-value vector, optionally restricted to named ``columns``."""
    X = np.stack([r.features.vector() for r in records])
    if columns is None:
        return X
    unknown = [c for c in columns if c not in FEATURE_COLUMNS]
    if unknown or not columns:
        raise BadConfig(f"unknown or empty feature columns {unknown or list(columns)}")
    return X[:, [FEATURE_COLUMNS.index(c) for c in columns]]


def train_survival(records: list[SurvivalRecord], cfg: forest.ForestConfig = forest.ForestConfig(),
                   jobs: int = 1, columns=None) -> forest.ForestModel:
    """Fit the forest on all 15 features, or on the subset named in ``columns``."""
    usable = [r for r in records if r.true_days is not None]
    if len(usable) < MIN_TRAIN_RECORDS:
        raise TooFewRecords(f"need >= {MIN_TRAIN_RECORDS} records with survival days, got {len(usable)}")
    y = np.array([r.true_days for r in usable], dtype=np.float64)
    columns = list(columns) if columns is not None else list(FEATURE_COLUMNS)
    model = forest.fit(feature_matrix(usable, columns), y, cfg, jobs=jobs)
    model.feature_names = columns
    return model


def predict_survival(model: forest.ForestModel, records: list[SurvivalRecord]) -> list[SurvivalRecord]:
    if not records:
        return []
    days = forest.predict_many(model, feature_matrix(records, model.feature_names))
    out = []
    for r, d in zip(records, days):
        out.append(SurvivalRecord(r.case_id, r.features, r.true_days, float(d), bucketize_days(float(d))))
    return out


def evaluate_survival(records: list[SurvivalRecord]) -> SurvivalReport:
    scored = [r for r in records if r.true_days is not None and r.predicted_days is not None]
    if len(scored) < 2:
        raise TooFewRecords(f"need >= 2 records with truth and prediction, got {len(scored)}")
    pred = np.array([r.predicted_days for r in scored])
    true = np.array([r.true_days for r in scored])
    mse, med, std = squared_error_summary(pred, true)
    confusion = {f"{a}->{b}": 0 for a in CLASSES for b in CLASSES}
    for p, t in zip(pred, true):
        confusion[f"{bucketize_days(t)}->{bucketize_days(p)}"] += 1
    return SurvivalReport(
        accuracy=bucket_accuracy(pred, true),
        mse=mse,
        median_se=med,
        std_se=std,
        spearman_r=spearman_r(pred, true),
        n=len(scored),
        confusion=confusion,
    )


# ---------------------------------------------------------------------------
# files


def write_features_csv(records: list[SurvivalRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id"] + FEATURE_COLUMNS + FLAG_COLUMNS)
        for r in records:
            w.writerow([r.case_id] + [repr(float(v)) for v in r.features.vector()]
                       + [int(f) for f in r.features.flags()])
    return path


def read_features_csv(path) -> list[SurvivalRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = [float(row[c]) for c in FEATURE_COLUMNS]
            means = {t: {m: vals[3 + i * 4 + j] for j, m in enumerate(MODALITIES)}
                     for i, t in enumerate((1, 2, 4))}
            present = {t: row[FLAG_COLUMNS[i]] == "1" for i, t in enumerate((1, 2, 4))}
            out.append(SurvivalRecord(row["case_id"], SurvivalFeatures(*vals[:3], means, present)))
    return out


def write_predictions_csv(records: list[SurvivalRecord], path) -> Path:
    """Submission shape: ``case_id,days`` per line, no header."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for r in records:
            w.writerow([r.case_id, f"{r.predicted_days:.6f}"])
    return path


def read_predictions_csv(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row[0]: float(row[1]) for row in csv.reader(fh) if row}


def write_report_json(report: SurvivalReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(asdict(report), indent=2, sort_keys=True))
    return path
