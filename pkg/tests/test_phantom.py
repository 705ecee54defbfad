import numpy as np
import pytest

from conftest import small_spec
from gliomaseg.errors import SpecInfeasible
from gliomaseg.metrics import evaluate_case, spearman_r
from gliomaseg.phantom import (
    DEFAULT_INTENSITIES,
    TISSUE_LABEL,
    PhantomSpec,
    brain_ellipsoid,
    generate_case,
    generate_dataset,
    read_truth_csv,
)
from gliomaseg.preprocess import bias_correct, masked_cv
from gliomaseg.survival import extract_features
from gliomaseg.volume_io import MODALITIES, list_cases, load_case, load_case_volume


def test_noise_free_voxels_equal_constants():
    spec = small_spec(noise_std=0.0)
    case = generate_case(spec, 0)
    lab = case.labels.values
    brain = case.extras["brain"]
    for j, m in enumerate(MODALITIES):
        v = case.modality(m).values
        assert np.all(v[brain & (lab == 0)] == np.float32(DEFAULT_INTENSITIES["healthy"][j]))
        for name, code in TISSUE_LABEL.items():
            sel = lab == code
            assert sel.any()
            assert np.all(v[sel] == np.float32(DEFAULT_INTENSITIES[name][j]))
        assert np.all(v[~brain] == 0)


def test_deterministic(spec32):
    a, b = generate_case(spec32, 4), generate_case(spec32, 4)
    for m in MODALITIES + ("labels",):
        assert a.modality(m).values.tobytes() == b.modality(m).values.tobytes()
    assert a.extras["true_days"] == b.extras["true_days"]
    assert generate_case(spec32, 5).extras["true_days"] != a.extras["true_days"]


def test_nesting_over_50_cases():
    spec = small_spec(tumor_count=2, noise_std=0.0)
    for i in range(50):
        lab = generate_case(spec, i).labels.values
        et, tc, wt = lab == 4, np.isin(lab, (1, 4)), lab > 0
        assert not (et & ~tc).any() and not (tc & ~wt).any()
        assert set(np.unique(lab)) <= {0, 1, 2, 4}
        assert not (wt & ~brain_ellipsoid(spec)).any()


def test_dataset_loadable_and_planted_rule(tmp_path):
    spec = small_spec(noise_std=0.0, survival_noise_std=0.0)
    ids = generate_dataset(spec, 12, tmp_path)
    assert list_cases(tmp_path) == ids
    truth = read_truth_csv(tmp_path / "survival.csv")
    planted, days = [], []
    for cid in ids:
        case = load_case(tmp_path, cid)
        brain = load_case_volume(tmp_path, cid, "brain")
        f = extract_features(case, case.labels, brain)
        vols = np.array([f.norm_vol_wt, f.norm_vol_tc, f.norm_vol_et])
        planted.append(spec.survival_intercept + float(np.dot(spec.survival_coefs, vols)))
        days.append(truth[cid])
    assert spearman_r(planted, days) >= 0.9
    np.testing.assert_allclose(planted, days, atol=1e-5)


def test_truth_vs_truth_is_perfect(spec32):
    for i in range(5):
        lab = generate_case(spec32, i).labels
        rep = evaluate_case(lab, lab)
        for s in rep.regions.values():
            assert s.dice == 1.0 and s.hd95 == 0.0 and s.sensitivity == 1.0


def test_bias_field_is_reducible():
    spec = small_spec(noise_std=0.0, bias_terms=(((1, 0, 0), 0.3), ((0, 1, 1), 0.2)))
    case = generate_case(spec, 2)
    brain = case.extras["brain"] & (case.labels.values == 0)
    t1 = case.modality("t1")
    before = masked_cv(t1.values, brain)
    after = masked_cv(bias_correct(t1, brain, degree=2).values, brain)
    assert after < before and after < 1e-5


@pytest.mark.parametrize("kw", [
    dict(radii_ratios=(1.0, 0.4, 0.6)),
    dict(brain_semi_axes=(20.0, 14.0, 12.0)),
    dict(wt_radius_range=(3.0, 13.0)),
    dict(tumor_count=0),
    dict(intensities={**DEFAULT_INTENSITIES, "edema": DEFAULT_INTENSITIES["healthy"]}),
])
def test_infeasible_specs(kw):
    with pytest.raises(SpecInfeasible):
        generate_case(small_spec(**kw), 0)


def test_spec_dict_roundtrip():
    spec = small_spec(bias_terms=(((1, 0, 0), 0.1),))
    assert PhantomSpec.from_dict(spec.to_dict()) == spec


def test_generate_dataset_requires_cases(tmp_path):
    with pytest.raises(SpecInfeasible):
        generate_dataset(small_spec(), 0, tmp_path)
