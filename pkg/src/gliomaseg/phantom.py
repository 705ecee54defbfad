"""Synthetic multimodal cases with exact ground truth.

A phantom is an ellipsoidal brain holding one or more ellipsoidal tumors made
of three nested shells: enhancing core (label 4) inside non-enhancing core
(label 1) inside edema (label 2).  Every tissue has a constant intensity per
modality; Gaussian noise and an optional log-polynomial bias field are applied
on top.  Survival days follow a planted linear rule on the normalized tumor
volumes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import SpecInfeasible
from .preprocess import evaluate_polynomial
from .volume_io import MODALITIES, MultimodalCase, VoxelGrid, save_case, save_nifti, case_path

TISSUES = ("healthy", "necrotic", "edema", "enhancing")
TISSUE_LABEL = {"necrotic": 1, "edema": 2, "enhancing": 4}
# overlap resolution between tumors, indexed by label value: 4 > 1 > 2 > 0
_PRIORITY = np.array([0, 2, 1, 0, 3])

DEFAULT_INTENSITIES = {
    # flair, t1, t1ce, t2
    "healthy": (100.0, 120.0, 115.0, 90.0),
    "necrotic": (130.0, 70.0, 80.0, 200.0),
    "edema": (180.0, 100.0, 105.0, 170.0),
    "enhancing": (150.0, 110.0, 220.0, 140.0),
}


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)
    brain_semi_axes: tuple = (27.0, 28.0, 24.0)  # voxels
    tumor_count: int = 1
    wt_radius_range: tuple = (7.0, 13.0)  # voxels
    radii_ratios: tuple = (1.0, 0.65, 0.38)  # WT, TC, ET (outer to inner)
    ratio_jitter: float = 0.05
    anisotropy: float = 0.15
    intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    noise_std: float = 8.0
    # ((i, j, k), coefficient) monomials in [-1, 1]^3 coordinates, log domain
    bias_terms: tuple = ()
    survival_intercept: float = 800.0
    survival_coefs: tuple = (-4000.0, -3000.0, -10000.0)  # on norm vol WT, TC, ET
    survival_noise_std: float = 30.0

    def validate(self):
        r = self.radii_ratios
        if not (len(r) == 3 and r[0] > r[1] > r[2] > 0):
            raise SpecInfeasible(f"radii ratios must be strictly decreasing inward, got {r}")
        if self.ratio_jitter * 2 >= min(r[0] - r[1], r[1] - r[2]):
            raise SpecInfeasible("ratio jitter would break the nesting order")
        for m_idx, m in enumerate(MODALITIES):
            vals = [self.intensities[t][m_idx] for t in TISSUES]
            if len(set(vals)) != len(vals):
                raise SpecInfeasible(f"tissue intensities in {m} are not distinct: {vals}")
        if any(2 * a + 1 > d for a, d in zip(self.brain_semi_axes, self.dims)):
            raise SpecInfeasible("brain ellipsoid does not fit in the volume")
        if self.tumor_count < 1:
            raise SpecInfeasible("tumor_count must be >= 1")
        lo, hi = self.wt_radius_range
        if not 0 < lo <= hi:
            raise SpecInfeasible(f"bad WT radius range {self.wt_radius_range}")
        if hi * (1 + self.anisotropy) >= min(self.brain_semi_axes):
            raise SpecInfeasible("tumor radius too large for the brain ellipsoid")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensities"] = {k: list(v) for k, v in self.intensities.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("dims", "spacing", "brain_semi_axes", "wt_radius_range", "radii_ratios",
                    "survival_coefs"):
            if key in d:
                d[key] = tuple(d[key])
        if "bias_terms" in d:
            d["bias_terms"] = tuple((tuple(e), float(c)) for e, c in d["bias_terms"])
        if "intensities" in d:
            d["intensities"] = {k: tuple(v) for k, v in d["intensities"].items()}
        return cls(**d)


def case_id_for(index: int) -> str:
    return f"PH_{index:04d}"


def _grid_coords(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def brain_ellipsoid(spec: PhantomSpec) -> np.ndarray:
    coords = _grid_coords(spec.dims)
    centre = [(n - 1) / 2.0 for n in spec.dims]
    rho2 = sum(((c - m) / a) ** 2 for c, m, a in zip(coords, centre, spec.brain_semi_axes))
    return rho2 <= 1.0


def _place_tumor(rng, spec: PhantomSpec, semi):
    centre = np.array([(n - 1) / 2.0 for n in spec.dims])
    brain = np.array(spec.brain_semi_axes)
    room = brain - semi.max() - 1.0
    if np.any(room <= 0):
        raise SpecInfeasible("tumor does not fit inside the brain ellipsoid")
    for _ in range(1000):
        u = rng.uniform(-1.0, 1.0, 3)
        if np.sum(u**2) <= 1.0:
            return centre + u * room
    raise SpecInfeasible("could not place tumor")  # pragma: no cover


def generate_case(spec: PhantomSpec, index: int) -> MultimodalCase:
    """Deterministic phantom number ``index``.

    ``extras`` carries ``brain`` (bool mask), ``bias_field`` (multiplicative
    field), ``true_days`` and ``tumors`` (geometry records).
    """
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    brain = brain_ellipsoid(spec)
    coords = _grid_coords(spec.dims)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    tumors = []
    for _ in range(spec.tumor_count):
        radius = rng.uniform(*spec.wt_radius_range)
        semi = radius * rng.uniform(1 - spec.anisotropy, 1 + spec.anisotropy, 3)
        ratios = np.array(spec.radii_ratios, dtype=np.float64)
        ratios[1:] += rng.uniform(-spec.ratio_jitter, spec.ratio_jitter, 2)
        c = _place_tumor(rng, spec, semi)
        rho = np.sqrt(sum(((x - m) / a) ** 2 for x, m, a in zip(coords, c, semi)))
        new = np.zeros(spec.dims, dtype=np.uint8)
        new[rho <= ratios[0]] = 2
        new[rho <= ratios[1]] = 1
        new[rho <= ratios[2]] = 4
        new[~brain] = 0
        take = _PRIORITY[new] > _PRIORITY[labels]
        labels[take] = new[take]
        tumors.append({"centre": c.tolist(), "semi_axes": semi.tolist(), "ratios": ratios.tolist()})

    tissue_map = np.zeros(spec.dims, dtype=np.int8)  # index into TISSUES, -1 outside brain
    tissue_map[~brain] = -1
    for t_idx, t in enumerate(TISSUES[1:], start=1):
        tissue_map[labels == TISSUE_LABEL[t]] = t_idx

    if spec.bias_terms:
        exps = [tuple(e) for e, _ in spec.bias_terms]
        coefs = [c for _, c in spec.bias_terms]
        bias = np.exp(evaluate_polynomial(spec.dims, exps, coefs))
    else:
        bias = np.ones(spec.dims)

    grids = {}
    for m_idx, m in enumerate(MODALITIES):
        consts = np.array([spec.intensities[t][m_idx] for t in TISSUES])
        vals = np.zeros(spec.dims)
        vals[brain] = consts[tissue_map[brain]]
        if spec.noise_std > 0:
            vals[brain] += rng.normal(0.0, spec.noise_std, int(brain.sum()))
        vals *= bias
        vals[brain] = np.maximum(vals[brain], 1e-3)
        grids[m] = VoxelGrid.from_array(vals.astype(np.float32), spacing=spec.spacing)

    n_brain = int(brain.sum())
    fractions = np.array([
        np.isin(labels, (1, 2, 4)).sum(),
        np.isin(labels, (1, 4)).sum(),
        (labels == 4).sum(),
    ]) / n_brain
    days = spec.survival_intercept + float(np.dot(spec.survival_coefs, fractions))
    if spec.survival_noise_std > 0:
        days += rng.normal(0.0, spec.survival_noise_std)
    days = max(days, 1.0)

    case = MultimodalCase(
        case_id_for(index),
        labels=VoxelGrid.from_array(labels, spacing=spec.spacing),
        extras={
            "brain": brain,
            "bias_field": bias,
            "true_days": float(days),
            "tumors": tumors,
            "volume_fractions": fractions.tolist(),
        },
        **grids,
    )
    return case


def generate_dataset(spec: PhantomSpec, n: int, directory, start: int = 0) -> list[str]:
    """Write ``n`` phantoms in BraTS layout plus ``survival.csv`` and ``phantom_spec.json``."""
    if n < 1:
        raise SpecInfeasible("need at least one case")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids, rows = [], []
    for i in range(start, start + n):
        case = generate_case(spec, i)
        save_case(case, directory)
        save_nifti(VoxelGrid.from_array(case.extras["brain"].astype(np.uint8), spacing=spec.spacing),
                   case_path(directory, case.case_id, "brain"))
        ids.append(case.case_id)
        rows.append((case.case_id, f"{case.extras['true_days']:.6f}"))
    with open(directory / "survival.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "days"])
        w.writerows(rows)
    (directory / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return ids


def read_truth_csv(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["case_id"]: float(row["days"]) for row in csv.DictReader(fh)}
