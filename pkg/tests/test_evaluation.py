import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nodeonet.dataset import GenSettings, build_dataset
from nodeonet.encoders import LearnedBasis, SensorEncoder
from nodeonet.errors import DegenerateLabelsError, ShapeError
from nodeonet.evaluation import EvalReport, compute_errors, evaluate, evaluate_extrapolation
from nodeonet.node import NodeVariant
from nodeonet.training import build_model


def test_exact_prediction_has_zero_error():
    labels = np.random.default_rng(0).normal(size=(2, 3, 4))
    r = compute_errors(labels, labels)
    assert (r.absolute_error, r.relative_error) == (0.0, 0.0)


def test_double_labels_relative_error_one():
    labels = np.random.default_rng(1).normal(size=(2, 3, 4))
    assert compute_errors(2 * labels, labels).relative_error == pytest.approx(1.0, rel=1e-14)


def test_constant_example():
    r = compute_errors(np.full((1, 1, 5), 3.0), np.full((1, 1, 5), 4.0))
    assert r.absolute_error == pytest.approx(1.0)
    assert r.relative_error == pytest.approx(0.25)


def test_zero_labels_rejected():
    with pytest.raises(DegenerateLabelsError):
        compute_errors(np.ones((1, 2, 3)), np.zeros((1, 2, 3)))
    with pytest.raises(ShapeError):
        compute_errors(np.ones((1, 2, 3)), np.ones((1, 3, 2)))


def test_per_time_rows_and_horizon_flags():
    labels = np.ones((2, 4, 3))
    pred = labels + np.arange(4)[None, :, None]
    r = compute_errors(pred, labels, times=[0.5, 1.0, 1.5, 2.0], T_train=1.0)
    assert [row["absolute_error"] for row in r.per_time] == [0.0, 1.0, 2.0, 3.0]
    assert [row["training_horizon"] for row in r.per_time] == [1, 1, 0, 0]


def test_report_dict_round_trip():
    r = compute_errors(np.ones((1, 2, 2)), 2 * np.ones((1, 2, 2)), times=[0.5, 1.0])
    assert EvalReport.from_dict(r.to_dict()).to_dict() == r.to_dict()


shaped = arrays(np.float64, (3, 2, 4), elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(shaped, shaped, st.permutations(range(3)), st.floats(0.01, 100))
def test_permutation_and_scale_invariance(pred, labels, perm, c):
    if np.sqrt(np.mean(labels**2)) < 1e-6:
        labels = labels + 1.0
    base = compute_errors(pred, labels)
    permuted = compute_errors(pred[list(perm)], labels[list(perm)])
    scaled = compute_errors(c * pred, c * labels)
    assert permuted.relative_error == pytest.approx(base.relative_error, rel=1e-12, abs=1e-15)
    assert scaled.relative_error == pytest.approx(base.relative_error, rel=1e-10, abs=1e-15)
    assert scaled.absolute_error == pytest.approx(c * base.absolute_error, rel=1e-10, abs=1e-15)


@pytest.fixture(scope="module")
def tiny():
    ds = build_dataset(GenSettings("dr-source", nx=10, nt=5, nx_test=10, nt_test=5), 2, 2, seed=3)
    v = NodeVariant("source", P=4, d_U=5, d_V=20)
    model = build_model(v, LearnedBasis(5, hidden=(8,)), SensorEncoder.uniform(20), ds.T, 5, 0)
    return ds, model


def test_evaluate_report_contents(tiny):
    ds, model = tiny
    report, pred = evaluate(model, ds, return_predictions=True)
    assert pred.shape == ds.test.labels.shape
    assert report.relative_error == pytest.approx(compute_errors(pred, ds.test.labels).relative_error)
    assert len(report.per_time) == 5 and len(report.field_slices) == 1


def test_extrapolation_at_training_horizon_is_identical(tiny):
    ds, model = tiny
    base, pred = evaluate(model, ds, return_predictions=True)
    report, within, labels = evaluate_extrapolation(model, ds, ds.T)
    assert np.array_equal(within, pred)
    assert np.array_equal(labels, ds.test.labels)
    assert report.relative_error == base.relative_error
    assert "extrapolated" not in report.horizon


def test_extrapolation_rejects_off_grid_horizon(tiny):
    ds, model = tiny
    with pytest.raises(ValueError):
        evaluate_extrapolation(model, ds, 1.1)
    with pytest.raises(ValueError):
        evaluate_extrapolation(model, ds, 0.5)
