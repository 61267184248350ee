"""Estimator facade: sklearn plumbing, validation, and a micro fit."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from eqocc import data_io
from eqocc.estimator import (
    OccupancyFieldEstimator,
    validate_cloud,
    validate_oracle,
    validate_queries,
)


class TestValidation:
    def test_cloud_shape_checked(self):
        with pytest.raises(ValueError, match=r"\(N, 3\)"):
            validate_cloud(np.zeros((4, 2)))
        with pytest.raises(ValueError, match="at least 2"):
            validate_cloud(np.zeros((1, 3)))
        with pytest.raises(ValueError, match="non-finite"):
            validate_cloud([[0.0, 0.0, np.nan], [1.0, 0, 0]])

    def test_queries_single_point_promoted(self):
        q = validate_queries([1.0, 2.0, 3.0])
        assert q.shape == (1, 3)

    def test_queries_shape_checked(self):
        with pytest.raises(ValueError, match=r"\(M, 3\)"):
            validate_queries(np.zeros((2, 4)))

    def test_oracle_protocol_checked(self):
        with pytest.raises(TypeError, match="sample_surface"):
            validate_oracle(object())
        validate_oracle(data_io.sphere())


class TestSklearnPlumbing:
    def test_get_set_params_roundtrip(self):
        est = OccupancyFieldEstimator(mult=16, heads=4, iterations=7)
        params = est.get_params()
        assert params["mult"] == 16
        est2 = OccupancyFieldEstimator().set_params(**params)
        assert est2.get_params() == params

    def test_clone(self):
        est = OccupancyFieldEstimator(iterations=3, seed=9)
        c = clone(est)
        assert c.get_params() == est.get_params()

    def test_predict_before_fit_raises(self):
        est = OccupancyFieldEstimator()
        with pytest.raises(NotFittedError):
            est.predict((np.zeros((4, 3)), np.zeros((2, 3))))


@pytest.fixture(scope="module")
def fitted():
    est = OccupancyFieldEstimator(
        enc_layers=1, dec_layers=1, heads=2, mult=8, k=4, dec_out_scalars=4,
        radial_hidden=4, iterations=30, batch=2, queries_per_item=24,
        input_points=24, seed=2,
    )
    est.fit([data_io.sphere(0.4)])
    rng = np.random.default_rng(0)
    cloud = data_io.sphere(0.4).sample_surface(rng, 40)
    return est, cloud


class TestFitPredict:
    def test_fit_returns_self_and_sets_state(self, fitted):
        est, _ = fitted
        assert est.trace_.shape == (30, 3)
        assert est.params_ is not None

    def test_fit_rejects_empty(self):
        with pytest.raises(ValueError, match="at least one"):
            OccupancyFieldEstimator().fit([])

    def test_fit_rejects_non_oracles(self):
        with pytest.raises(TypeError):
            OccupancyFieldEstimator().fit([np.zeros((10, 3))])

    def test_decision_function_in_unit_interval(self, fitted):
        est, cloud = fitted
        qs = np.random.default_rng(1).uniform(-0.6, 0.6, (16, 3))
        vals = est.decision_function((cloud, qs))
        assert vals.shape == (16,)
        assert np.all((vals > 0) & (vals < 1))

    def test_predict_is_thresholded(self, fitted):
        est, cloud = fitted
        qs = np.random.default_rng(1).uniform(-0.6, 0.6, (16, 3))
        pred = est.predict((cloud, qs))
        assert pred.dtype == bool
        np.testing.assert_array_equal(
            pred, est.decision_function((cloud, qs)) > est.occ_threshold
        )

    def test_predict_validates_pair(self, fitted):
        est, cloud = fitted
        with pytest.raises(ValueError, match="pair"):
            est.predict(cloud)

    def test_score_is_iou(self, fitted):
        est, cloud = fitted
        qs = np.random.default_rng(2).uniform(-0.6, 0.6, (32, 3))
        y = data_io.sphere(0.4).contains(qs)
        s = est.score((cloud, qs), y)
        assert 0.0 <= s <= 1.0

    def test_score_checks_lengths(self, fitted):
        est, cloud = fitted
        qs = np.zeros((4, 3))
        with pytest.raises(ValueError, match="labels"):
            est.score((cloud, qs), np.zeros(3))

    def test_reconstruct_returns_mesh(self, fitted):
        est, cloud = fitted
        mesh = est.reconstruct(cloud, resolution=10)
        assert mesh.vertices.shape[1] == 3
