import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from coloc.calibration import CalibrationModel, LinearRangeCalibrator
from coloc.geometry import CANONICAL_PAIRS, canonical_geometry, canonical_topology, true_distances
from coloc.solver import RelativePoseEstimator

TRUTH = canonical_geometry("quadrilateral")
D = true_distances(TRUTH, canonical_topology())
ROW = np.array([D[p] for p in CANONICAL_PAIRS])
FLAT_TRUTH = np.array([c for n in range(4) for c in (TRUTH[n].x, TRUTH[n].y)])


def test_get_params_and_clone():
    est = RelativePoseEstimator(max_iterations=20, warm_start=False)
    params = est.get_params()
    assert params["max_iterations"] == 20 and params["warm_start"] is False
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert clone(LinearRangeCalibrator(pairs=list(CANONICAL_PAIRS))).get_params()["pairs"] == list(CANONICAL_PAIRS)


def test_predict_layout_and_score():
    X = np.tile(ROW, (3, 1))
    est = RelativePoseEstimator().fit(X)
    pred = est.predict(X)
    assert pred.shape == (3, 8)
    assert np.abs(pred - FLAT_TRUTH).max() < 1e-9
    assert est.score(X, np.tile(FLAT_TRUTH, (3, 1))) == pytest.approx(0.0, abs=1e-9)
    assert est.n_features_in_ == 5


def test_input_validation():
    est = RelativePoseEstimator()
    with pytest.raises(ValueError):
        est.fit(np.ones((2, 4)))
    with pytest.raises(ValueError):
        est.fit(-np.ones((2, 5)))
    with pytest.raises(ValueError):
        est.predict(np.full((1, 5), np.nan))
    with pytest.raises(ValueError):
        RelativePoseEstimator(max_iterations=0).fit(np.tile(ROW, (1, 1)))


def test_pipeline_of_calibrator_and_estimator():
    slopes = np.array([1.01, 0.99, 1.02, 0.98, 1.0])
    icepts = np.array([0.3, 0.2, 0.4, 0.25, 0.35])
    models = [CalibrationModel(p, m, q) for p, m, q in zip(CANONICAL_PAIRS, slopes, icepts)]
    raw = np.tile(ROW * slopes + icepts, (4, 1))
    pipe = make_pipeline(LinearRangeCalibrator.from_models(models), RelativePoseEstimator())
    pipe.fit(raw)
    assert np.abs(pipe.predict(raw) - FLAT_TRUTH).max() < 1e-9


def test_calibrator_fit_from_reference_grid():
    refs = np.array([1.0, 2.0, 3.0, 4.0])
    X = refs[:, None] * np.array([1.01, 0.99]) + np.array([0.3, 0.2])
    cal = LinearRangeCalibrator().fit(X, refs)
    assert [m.pair.tag for m in cal.models_] == [-1, -1]
    assert cal.transform(X) == pytest.approx(np.column_stack([refs, refs]), abs=1e-12)
    with pytest.raises(ValueError):
        LinearRangeCalibrator(pairs=CANONICAL_PAIRS[:1]).fit(X, refs)


def test_unfitted_calibrator_needs_references():
    with pytest.raises(ValueError, match="reference distances"):
        LinearRangeCalibrator().fit(np.ones((4, 2)))
