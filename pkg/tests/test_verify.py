"""Verification suites pass on a healthy install and catch injected faults."""

import numpy as np
import pytest

from eqocc import model, verify

FAST_MODEL = dict(
    transforms=4, points=40, queries=12, permutations=3,
    cfg=model.ModelConfig(enc_layers=2, dec_layers=2, heads=2, mult=8, k=6,
                          dec_out_scalars=8, radial_hidden=8, seed=0),
)


class TestSuites:
    def test_so3_passes(self):
        report = verify.suite_so3(seed=1)
        assert report["ok"]
        for check in report["checks"]:
            assert check["max_dev"] <= 1e-8, check

    def test_layers_passes(self):
        report = verify.suite_layers(seed=2)
        assert report["ok"]

    def test_model_passes_on_small_config(self):
        report = verify.suite_model(seed=3, **FAST_MODEL)
        assert report["ok"]
        by_name = {c["name"]: c for c in report["checks"]}
        assert by_name["occupancy_permutation_bitwise"]["max_dev"] == 0.0

    def test_grad_passes_on_tiny_config(self):
        report = verify.suite_grad(seed=4, elements_per_tensor=2)
        assert report["ok"]
        assert report["checks"][0]["checked"] > 0

    def test_run_suite_dispatch(self):
        assert verify.run_suite("so3", seed=0)["suite"] == "so3"
        with pytest.raises(ValueError, match="unknown suite"):
            verify.run_suite("nope")

    def test_tol_override_fails_suite(self):
        assert not verify.run_suite("so3", seed=0, tol=0.0)["ok"]


class TestFaultInjection:
    def test_corrupted_cg_fails_model_suite(self):
        healthy = verify.suite_model(seed=5, **FAST_MODEL)
        assert healthy["ok"]
        with verify.corrupted_cg(k=1, l=1, J=1, m=0):
            corrupted = verify.suite_model(seed=5, **FAST_MODEL)
        assert not corrupted["ok"]
        by_name = {c["name"]: c for c in corrupted["checks"]}
        assert not by_name["occupancy_se3_invariance"]["ok"]

    def test_corruption_is_scoped(self):
        from eqocc import so3

        with verify.corrupted_cg(k=1, l=1, J=1, m=0):
            bad = so3.clebsch_gordan(1, 1, 1)
        good = so3.clebsch_gordan(1, 1, 1)
        assert not np.array_equal(bad, good)
        np.testing.assert_array_equal(bad[0], -good[0])
        np.testing.assert_array_equal(bad[1:], good[1:])

    def test_corrupted_cg_fails_so3_suite(self):
        with verify.corrupted_cg(k=1, l=0, J=1, m=1):
            report = verify.suite_so3(seed=6)
        assert not report["ok"]
