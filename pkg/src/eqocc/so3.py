"""Rotations and the real representation theory used by the equivariant layers.

Everything downstream (kernel bases, feature transforms, equivariance tests)
reduces to three families of objects:

  * rotation matrices in SO(3),
  * real spherical harmonics ``Y_l``, ordered ``m = -l..l``,
  * real Wigner matrices ``D_l(r)`` satisfying ``Y_l(R x) = D_l(r) Y_l(x)``,

plus the Clebsch-Gordan intertwiners that couple two irreducible types through
a third.

Conventions
-----------
The real harmonics carry the standard normalisation
``integral_{S^2} Y_lm Y_l'm' = delta`` and no Condon-Shortley phase, so

    Y_0 = 1 / (2 sqrt(pi)),
    Y_1(x) = sqrt(3 / 4 pi) * (y, z, x).

The ``(y, z, x)`` ordering for l = 1 means ``D_1(r) = P R P^T`` with ``P`` the
coordinate permutation ``(x, y, z) -> (y, z, x)``.

Rather than tracking complex-basis generator algebra, ``wigner_d`` solves the
defining relation directly: ``D_l`` is the unique linear map taking the
harmonic values on a fixed, well-conditioned set of directions to the values
on the rotated directions.  The cached pseudoinverse makes this a single small
matrix product per call, exact to solver precision (~1e-13).

Clebsch-Gordan stacks ``Q_J`` are likewise computed numerically, as the null
space of the intertwiner constraint

    sum_m' D_J(r)[m', m] Q[m'] = D_k(r) Q[m] D_l(r)^T

imposed for rotations about x, y and z by 0.7 rad.  Invariance under those
three elements forces invariance under the (dense) subgroup they generate and
hence under all of SO(3), so the null space is exactly the one-dimensional
space of intertwiners.  Each m-slice is Frobenius-normalised (slice norms are
provably equal) and the overall sign is fixed by the first nonzero entry.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

__all__ = [
    "rotation_from_axis_angle",
    "random_rotation",
    "check_rotation",
    "real_sph_harm",
    "wigner_d",
    "clebsch_gordan",
    "angular_kernel_basis",
]

ROTATION_TOL = 1e-12


def rotation_from_axis_angle(axis, angle):
    """Rotation matrix for a right-handed turn of ``angle`` about ``axis``.

    Rodrigues' formula on the normalised axis.  ``axis`` need not be unit
    length but must be nonzero.
    """
    axis = np.asarray(axis, dtype=np.float64)
    if axis.shape != (3,):
        raise ValueError(f"axis must have shape (3,), got {axis.shape}")
    n = np.linalg.norm(axis)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("axis must be a finite nonzero vector")
    x, y, z = axis / n
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def random_rotation(rng):
    """Haar-distributed rotation drawn from ``rng`` (quaternion method)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def check_rotation(m, tol=ROTATION_TOL):
    """Validate that ``m`` is a rotation matrix; returns it as float64.

    Raises ``ValueError`` when ``m`` is not orthogonal with determinant +1
    within ``tol``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"rotation must have shape (3, 3), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("rotation contains non-finite entries")
    err = np.abs(m @ m.T - np.eye(3)).max()
    det = np.linalg.det(m)
    if err > tol or abs(det - 1.0) > tol:
        raise ValueError(f"not a rotation: |R R^T - I| = {err:.3e}, det = {det:.15g}")
    return m


def real_sph_harm(l, dirs):
    """Real spherical harmonics ``Y_l`` at unit directions.

    Args:
        l: degree, ``l >= 0``.
        dirs: array of shape ``(..., 3)`` of unit vectors.

    Returns:
        Array of shape ``(..., 2l + 1)``, components ordered ``m = -l..l``.

    The implementation is polynomial in (x, y, z): associated Legendre parts
    with the ``sin^m`` factor divided out combine with ``Re/Im[(x + iy)^m]``,
    so there is no pole or atan2 branch anywhere.
    """
    if l < 0:
        raise ValueError("l must be >= 0")
    d = np.asarray(dirs, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ValueError(f"directions must have shape (..., 3), got {d.shape}")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (2 * l + 1,), dtype=np.float64)

    # pi_m[m] = P_l^m(z) / sin^m(theta), by upward recurrence in l.
    pi_m = []
    for m in range(l + 1):
        p_mm = np.full_like(z, float(_double_factorial(2 * m - 1)))
        if l == m:
            pi_m.append(p_mm)
            continue
        p_m1 = z * (2 * m + 1) * p_mm
        if l == m + 1:
            pi_m.append(p_m1)
            continue
        for ll in range(m + 2, l + 1):
            p_mm, p_m1 = p_m1, (z * (2 * ll - 1) * p_m1 - (ll + m - 1) * p_mm) / (ll - m)
        pi_m.append(p_m1)

    # a_m + i b_m = (x + i y)^m
    a, b = np.ones_like(x), np.zeros_like(x)
    out[..., l] = _sph_norm(l, 0) * pi_m[0]
    for m in range(1, l + 1):
        a, b = x * a - y * b, x * b + y * a
        c = math.sqrt(2.0) * _sph_norm(l, m)
        out[..., l + m] = c * pi_m[m] * a
        out[..., l - m] = c * pi_m[m] * b
    return out


def _double_factorial(n):
    return 1 if n <= 0 else math.prod(range(n, 0, -2))


def _sph_norm(l, m):
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


@lru_cache(maxsize=None)
def _harmonic_frame(l):
    """Fixed direction set and cached projector used to solve for D_l.

    Returns ``(dirs, proj)`` with ``proj = pinv(A)^T`` for ``A[s] = Y_l(dirs[s])``,
    so that ``wigner_d`` is ``Y_l(R dirs)^T @ proj``.
    """
    n = 4 * l + 12
    # Fibonacci sphere: well spread, deterministic.
    i = np.arange(n, dtype=np.float64)
    phi = i * (math.pi * (3.0 - math.sqrt(5.0)))
    z = 1.0 - (2.0 * i + 1.0) / n
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)
    A = real_sph_harm(l, dirs)
    proj = np.linalg.pinv(A).T
    return dirs, proj


def wigner_d(l, rotation):
    """Real Wigner matrix ``D_l(r)`` with ``Y_l(R x) = D_l(r) Y_l(x)``.

    Args:
        l: degree of the representation.
        rotation: ``(3, 3)`` rotation matrix.

    Returns:
        ``(2l + 1, 2l + 1)`` orthogonal matrix.
    """
    r = check_rotation(rotation, tol=1e-9)
    if l == 0:
        return np.ones((1, 1))
    dirs, proj = _harmonic_frame(l)
    return real_sph_harm(l, dirs @ r.T).T @ proj


@lru_cache(maxsize=None)
def _clebsch_gordan_cached(k, l, J):
    kd, ld, Jd = 2 * k + 1, 2 * l + 1, 2 * J + 1
    blocks = []
    for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])):
        r = rotation_from_axis_angle(axis, 0.7)
        Dk, Dl, DJ = wigner_d(k, r), wigner_d(l, r), wigner_d(J, r)
        # Constraint per m-slice: sum_m' DJ[m',m] Q[m'] - Dk Q[m] Dl^T = 0,
        # linearised over row-major vec(Q).
        blocks.append(np.kron(DJ.T, np.eye(kd * ld)) - np.kron(np.eye(Jd), np.kron(Dk, Dl)))
    A = np.vstack(blocks)
    _, s, vt = np.linalg.svd(A)
    if s[-1] > 1e-8 or (s.size > 1 and s[-2] < 1e-3):
        raise RuntimeError(
            f"intertwiner null space for (k={k}, l={l}, J={J}) is not one-dimensional: "
            f"smallest singular values {s[-2]:.3e}, {s[-1]:.3e}"
        )
    q = vt[-1].reshape(Jd, kd, ld)
    # Slice Frobenius norms are equal by Schur's lemma; normalise each to 1.
    q *= math.sqrt(Jd) / np.linalg.norm(q)
    flat = q.ravel()
    lead = flat[np.argmax(np.abs(flat) > 1e-8 * np.abs(flat).max())]
    if lead < 0:
        q = -q
    q.setflags(write=False)
    return q


def clebsch_gordan(k, l, J):
    """Clebsch-Gordan stack ``Q_J`` coupling an l-type input to a k-type output.

    Args:
        k: output irreducible type.
        l: input irreducible type.
        J: coupling degree, must satisfy ``|k - l| <= J <= k + l``.

    Returns:
        Read-only array of shape ``(2J + 1, 2k + 1, 2l + 1)`` whose m-slices
        each have unit Frobenius norm and satisfy the intertwiner identity
        ``sum_m' D_J(r)[m', m] Q[m'] = D_k(r) Q[m] D_l(r)^T`` for all r.
    """
    for name, v in (("k", k), ("l", l), ("J", J)):
        if not isinstance(v, (int, np.integer)) or v < 0:
            raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")
    if not abs(k - l) <= J <= k + l:
        raise ValueError(f"J={J} outside the admissible range [{abs(k - l)}, {k + l}]")
    return _clebsch_gordan_cached(int(k), int(l), int(J))


def angular_kernel_basis(k, l, J, dirs):
    """Angular kernel block ``C_J(x) = sum_m Y_Jm(x) Q_Jm`` at unit directions.

    Args:
        k, l, J: as for :func:`clebsch_gordan`.
        dirs: array ``(..., 3)`` of unit vectors.

    Returns:
        Array of shape ``(..., 2k + 1, 2l + 1)`` satisfying
        ``C_J(R x) = D_k(r) C_J(x) D_l(r)^T``.
    """
    y = real_sph_harm(J, dirs)
    return np.einsum("...m,mab->...ab", y, clebsch_gordan(k, l, J))
