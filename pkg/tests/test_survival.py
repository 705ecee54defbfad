import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gliomaseg.errors import EmptyBrainMask, NegativeDays, NonFiniteInput, TooFewRecords
from gliomaseg.forest import ForestConfig
from gliomaseg.phantom import DEFAULT_INTENSITIES, generate_case
from gliomaseg.survival import (
    CLASSES,
    FEATURE_COLUMNS,
    SurvivalFeatures,
    SurvivalRecord,
    bucketize_days,
    evaluate_survival,
    extract_features,
    predict_survival,
    read_features_csv,
    read_predictions_csv,
    train_survival,
    write_features_csv,
    write_predictions_csv,
    write_report_json,
)
from gliomaseg.volume_io import MODALITIES, MultimodalCase, VoxelGrid


def _flat_case(dims=(10, 10, 1)):
    grids = {m: VoxelGrid.from_array(np.full(dims, float(i + 1), np.float32)) for i, m in enumerate(MODALITIES)}
    return MultimodalCase("F", **grids)


def test_volume_fractions_and_missing_tissue():
    case = _flat_case()
    labels = np.zeros((10, 10, 1), np.uint8)
    labels.flat[:6] = 2
    labels.flat[6:10] = 1
    f = extract_features(case, labels, np.ones((10, 10, 1), bool))
    assert f.norm_vol_wt == 0.1 and f.norm_vol_tc == 0.04 and f.norm_vol_et == 0.0
    assert f.present == {1: True, 2: True, 4: False}
    assert all(v == 0.0 for v in f.mean_intensity[4].values())
    assert f.mean_intensity[2]["t1ce"] == 3.0
    assert f.vector().shape == (15,) and len(FEATURE_COLUMNS) == 15


def test_empty_brain():
    with pytest.raises(EmptyBrainMask):
        extract_features(_flat_case(), np.zeros((10, 10, 1)), np.zeros((10, 10, 1), bool))


def test_phantom_means_equal_generator_constants(spec32):
    spec = type(spec32)(**{**spec32.__dict__, "noise_std": 0.0})
    case = generate_case(spec, 3)
    f = extract_features(case, case.labels, case.extras["brain"])
    names = {1: "necrotic", 2: "edema", 4: "enhancing"}
    for t, name in names.items():
        for j, m in enumerate(MODALITIES):
            assert abs(f.mean_intensity[t][m] - DEFAULT_INTENSITIES[name][j]) < 1e-6
    np.testing.assert_allclose([f.norm_vol_wt, f.norm_vol_tc, f.norm_vol_et], case.extras["volume_fractions"])


def test_feature_permutation_invariance(rng, spec32):
    case = generate_case(spec32, 1)
    perm = rng.permutation(case.labels.values.size)

    def shuffled(a):
        return a.ravel()[perm].reshape(a.shape)

    p_case = MultimodalCase("P", **{m: case.modality(m).with_values(shuffled(case.modality(m).values))
                                    for m in MODALITIES})
    a = extract_features(case, case.labels, case.extras["brain"]).vector()
    b = extract_features(p_case, shuffled(case.labels.values), shuffled(case.extras["brain"])).vector()
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_bucketize():
    assert bucketize_days(200) == "short"
    assert bucketize_days(400) == "medium"
    assert bucketize_days(500) == "long"
    assert bucketize_days(304.375) == "medium" and bucketize_days(456.5625) == "medium"
    assert bucketize_days(304.37) == "short" and bucketize_days(456.57) == "long"
    with pytest.raises(NegativeDays):
        bucketize_days(-1)


@given(st.floats(0, 5000), st.floats(0, 5000))
def test_bucketize_monotone(a, b):
    lo, hi = sorted((a, b))
    assert CLASSES.index(bucketize_days(lo)) <= CLASSES.index(bucketize_days(hi))


def _records(n, rng, days_fn):
    out = []
    for i in range(n):
        vol = rng.uniform(0.01, 0.3)
        means = {t: {m: float(rng.normal()) for m in MODALITIES} for t in (1, 2, 4)}
        f = SurvivalFeatures(vol, vol * 0.5, vol * 0.1, means, {1: True, 2: True, 4: True})
        out.append(SurvivalRecord(f"R{i}", f, days_fn(vol)))
    return out


def test_planted_rule_held_out(rng):
    recs = _records(80, rng, lambda v: 1000 * v + rng.normal(0, 10))
    model = train_survival(recs[:60])
    rep = evaluate_survival(predict_survival(model, recs[60:]))
    assert rep.spearman_r >= 0.6


def test_constant_days_and_errors(rng):
    recs = _records(12, rng, lambda v: 365.0)
    preds = predict_survival(train_survival(recs), recs)
    assert all(r.predicted_days == 365.0 and r.predicted_class == "medium" for r in preds)
    with pytest.raises(TooFewRecords):
        train_survival(recs[:9])
    recs[0].features.norm_vol_wt = float("nan")
    with pytest.raises(NonFiniteInput):
        train_survival(recs)


def test_evaluate_examples():
    perfect = [SurvivalRecord(str(i), None, d, d) for i, d in enumerate([100.0, 350, 700])]
    rep = evaluate_survival(perfect)
    assert (rep.accuracy, rep.mse, rep.spearman_r) == (1.0, 0.0, 1.0)
    rev = [SurvivalRecord(str(i), None, t, p) for i, (t, p) in enumerate(zip([1.0, 2, 3, 4], [40.0, 30, 20, 10]))]
    assert evaluate_survival(rev).spearman_r == -1.0
    with pytest.raises(TooFewRecords):
        evaluate_survival(perfect[:1])


def test_evaluate_hand_computed_five_records():
    truth = [100.0, 300.0, 400.0, 500.0, 800.0]
    pred = [150.0, 320.0, 350.0, 600.0, 700.0]
    # classes truth: S S M L L ; pred: S M M L L -> 4/5
    # SE: 2500, 400, 2500, 10000, 10000 -> mean 5080, median 2500
    # std: sqrt(mean((SE - 5080)^2)) = sqrt((6656400 + 21902400 + 6656400 + 24206400 * 2) / 5)
    # ranks identical order -> spearman 1
    recs = [SurvivalRecord(str(i), None, t, p) for i, (t, p) in enumerate(zip(truth, pred))]
    rep = evaluate_survival(recs)
    assert rep.accuracy == 0.8
    assert rep.mse == 5080.0
    assert rep.median_se == 2500.0
    assert rep.std_se == pytest.approx(np.sqrt((6656400 + 21902400 + 6656400 + 24206400 * 2) / 5), rel=1e-15)
    assert rep.spearman_r == 1.0
    assert rep.confusion["short->medium"] == 1


def test_files_roundtrip(tmp_path, rng):
    recs = _records(12, rng, lambda v: 1000 * v)
    recs[3].features.present[4] = False
    back = read_features_csv(write_features_csv(recs, tmp_path / "f.csv"))
    np.testing.assert_array_equal([r.features.vector() for r in back], [r.features.vector() for r in recs])
    assert back[3].features.present[4] is False
    preds = predict_survival(train_survival(recs, ForestConfig(n_trees=3)), recs)
    path = write_predictions_csv(preds, tmp_path / "p.csv")
    assert not path.read_text().startswith("case_id")
    assert set(read_predictions_csv(path)) == {r.case_id for r in recs}
    assert "spearman_r" in write_report_json(evaluate_survival(preds), tmp_path / "r.json").read_text()


def test_feature_column_ablation(rng):
    from gliomaseg.errors import BadConfig
    from gliomaseg.forest import ForestModel

    recs = _records(30, rng, lambda v: 1000 * v)
    model = train_survival(recs, ForestConfig(n_trees=5), columns=["norm_vol_wt"])
    assert model.n_features == 1
    back = ForestModel.from_json(model.to_json())
    assert back.feature_names == ["norm_vol_wt"]
    a = [r.predicted_days for r in predict_survival(model, recs)]
    assert a == [r.predicted_days for r in predict_survival(back, recs)]
    assert train_survival(recs, ForestConfig(n_trees=5)).feature_names == FEATURE_COLUMNS
    with pytest.raises(BadConfig):
        train_survival(recs, columns=["age"])
