"""Rotation, Wigner, and Clebsch-Gordan contracts."""

import math

import numpy as np
import pytest

from eqocc import so3

PERM_YZX = np.array([[0.0, 1, 0], [0, 0, 1], [1, 0, 0]])


class TestRotation:
    def test_axis_angle_z_quarter_turn(self):
        r = so3.rotation_from_axis_angle([0, 0, 1], math.pi / 2)
        np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_axis_normalisation_irrelevant(self):
        a = so3.rotation_from_axis_angle([0, 0, 2.5], 0.3)
        b = so3.rotation_from_axis_angle([0, 0, 1], 0.3)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_zero_axis_rejected(self):
        with pytest.raises(ValueError):
            so3.rotation_from_axis_angle([0, 0, 0], 1.0)

    def test_random_rotations_are_rotations(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            m = so3.random_rotation(rng)
            assert np.abs(m @ m.T - np.eye(3)).max() < 1e-12
            assert abs(np.linalg.det(m) - 1.0) < 1e-12

    def test_haar_first_entry_mean(self):
        # E[R_00] = 0 and Var[R_00] = 1/3 under Haar; 3-sigma band at n = 1e4.
        rng = np.random.default_rng(11)
        samples = np.array([so3.random_rotation(rng)[0, 0] for _ in range(10_000)])
        assert abs(samples.mean()) < 3.0 * math.sqrt(1.0 / 3.0 / 10_000)

    def test_check_rotation_rejects_reflection(self):
        m = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            so3.check_rotation(m)


class TestSphericalHarmonics:
    def test_l0_constant(self):
        v = so3.real_sph_harm(0, np.array([0.2672612, 0.5345225, 0.8017837]))
        np.testing.assert_allclose(v, [1.0 / (2.0 * math.sqrt(math.pi))], atol=1e-12)
        np.testing.assert_allclose(v, [0.28209479], atol=1e-8)

    def test_l1_at_z(self):
        v = so3.real_sph_harm(1, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(v, [0.0, 0.4886025, 0.0], atol=1e-7)

    def test_l1_is_yzx(self):
        rng = np.random.default_rng(3)
        d = rng.standard_normal((50, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        expected = math.sqrt(3.0 / (4.0 * math.pi)) * d @ PERM_YZX.T
        np.testing.assert_allclose(so3.real_sph_harm(1, d), expected, atol=1e-14)

    def test_orthonormality_by_quadrature(self):
        # Monte-Carlo estimate of <Y_lm, Y_l'm'> over the sphere.
        rng = np.random.default_rng(5)
        d = rng.standard_normal((400_000, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        ys = np.concatenate([so3.real_sph_harm(l, d) for l in range(4)], axis=-1)
        gram = 4.0 * math.pi * ys.T @ ys / d.shape[0]
        np.testing.assert_allclose(gram, np.eye(16), atol=1e-2)

    def test_equivariance_under_wigner(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            l = rng.integers(0, 4)
            r = so3.random_rotation(rng)
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            lhs = so3.real_sph_harm(l, r @ d)
            rhs = so3.wigner_d(l, r) @ so3.real_sph_harm(l, d)
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_poles_are_finite(self):
        for l in range(6):
            v = so3.real_sph_harm(l, np.array([[0.0, 0, 1], [0.0, 0, -1]]))
            assert np.all(np.isfinite(v))


class TestWignerD:
    def test_identity(self):
        for l in range(5):
            np.testing.assert_allclose(so3.wigner_d(l, np.eye(3)), np.eye(2 * l + 1), atol=1e-12)

    def test_l1_is_conjugated_rotation(self):
        r = so3.rotation_from_axis_angle([0, 0, 1], 0.923)
        np.testing.assert_allclose(
            so3.wigner_d(1, r), PERM_YZX @ r @ PERM_YZX.T, atol=1e-12
        )

    def test_orthogonality(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            l = rng.integers(0, 5)
            d = so3.wigner_d(l, so3.random_rotation(rng))
            assert np.abs(d @ d.T - np.eye(2 * l + 1)).max() < 1e-10

    def test_homomorphism(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            r1, r2 = so3.random_rotation(rng), so3.random_rotation(rng)
            for l in range(4):
                lhs = so3.wigner_d(l, r1 @ r2)
                rhs = so3.wigner_d(l, r1) @ so3.wigner_d(l, r2)
                assert np.abs(lhs - rhs).max() < 1e-10


class TestClebschGordan:
    def test_range_validation(self):
        with pytest.raises(ValueError):
            so3.clebsch_gordan(1, 1, 3)
        with pytest.raises(ValueError):
            so3.clebsch_gordan(2, 0, 1)

    def test_scalar_coupling_is_identity(self):
        q = so3.clebsch_gordan(1, 1, 0)
        np.testing.assert_allclose(q[0], np.eye(3) / math.sqrt(3.0), atol=1e-10)

    def test_vector_coupling_is_antisymmetric(self):
        # 1 x 1 -> 1 is the cross product: each slice antisymmetric.
        q = so3.clebsch_gordan(1, 1, 1)
        for m in range(3):
            np.testing.assert_allclose(q[m], -q[m].T, atol=1e-10)

    def test_slice_norms(self):
        for k, l, J in [(0, 0, 0), (1, 0, 1), (1, 1, 2), (2, 1, 3), (2, 2, 4), (2, 2, 0)]:
            q = so3.clebsch_gordan(k, l, J)
            norms = np.linalg.norm(q.reshape(q.shape[0], -1), axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-10)

    def test_intertwiner_identity(self):
        rng = np.random.default_rng(19)
        combos = [
            (k, l, J) for k in range(3) for l in range(3) for J in range(abs(k - l), k + l + 1)
        ]
        for _ in range(25):
            r = so3.random_rotation(rng)
            for k, l, J in combos:
                q = so3.clebsch_gordan(k, l, J)
                lhs = np.einsum("pm,pab->mab", so3.wigner_d(J, r), q)
                rhs = np.einsum("ab,mbc,dc->mad", so3.wigner_d(k, r), q, so3.wigner_d(l, r))
                assert np.abs(lhs - rhs).max() < 1e-9


class TestAngularKernelBasis:
    def test_scalar_block_at_z(self):
        c = so3.angular_kernel_basis(1, 1, 0, np.array([0.0, 0.0, 1.0]))
        expected = 1.0 / (2.0 * math.sqrt(math.pi)) / math.sqrt(3.0) * np.eye(3)
        np.testing.assert_allclose(c, expected, atol=1e-10)

    def test_equivariance(self):
        rng = np.random.default_rng(23)
        for _ in range(60):
            k, l = rng.integers(0, 3), rng.integers(0, 3)
            J = rng.integers(abs(k - l), k + l + 1)
            r = so3.random_rotation(rng)
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            lhs = so3.angular_kernel_basis(k, l, J, r @ d)
            rhs = so3.wigner_d(k, r) @ so3.angular_kernel_basis(k, l, J, d) @ so3.wigner_d(l, r).T
            assert np.abs(lhs - rhs).max() < 1e-9
