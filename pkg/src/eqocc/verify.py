"""Runtime property verification: representations, layers, model, gradients.

Each suite re-derives the invariants the library is built on and reports the
worst deviation it saw, so a corrupted install (or a corrupted constant, see
:func:`corrupted_cg`) fails loudly instead of silently degrading.  Suites
return plain dicts ready for JSON serialization; ``ok`` is the conjunction of
every check passing its tolerance.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import attention as at
from . import data_io
from . import fibers as fb
from . import geometry as geo
from . import model
from . import so3
from . import training

__all__ = [
    "SUITES",
    "run_suite",
    "suite_so3",
    "suite_layers",
    "suite_model",
    "suite_grad",
    "corrupted_cg",
]


def _check(name, max_dev, tol, **extra):
    rec = {"name": name, "max_dev": float(max_dev), "tol": float(tol),
           "ok": bool(max_dev <= tol)}
    rec.update(extra)
    return rec


def _report(suite, seed, checks):
    return {
        "suite": suite,
        "seed": int(seed),
        "ok": all(c["ok"] for c in checks),
        "checks": checks,
    }


# ---------------------------------------------------------------------------
# representation suite


def suite_so3(seed=0, tol=1e-8, draws=100):
    """Group-theory identities underneath everything else."""
    rng = np.random.default_rng(seed)
    checks = []

    dev = 0.0
    for i in range(draws):
        l = i % 4
        r1, r2 = so3.random_rotation(rng), so3.random_rotation(rng)
        lhs = so3.wigner_d(l, r1 @ r2)
        rhs = so3.wigner_d(l, r1) @ so3.wigner_d(l, r2)
        dev = max(dev, float(np.abs(lhs - rhs).max()))
    checks.append(_check("wigner_homomorphism", dev, tol, draws=draws))

    pairs = [(k, l, J) for k in range(3) for l in range(3)
             for J in range(abs(k - l), k + l + 1)]
    dev = 0.0
    for i in range(draws):
        k, l, J = pairs[i % len(pairs)]
        q = so3.clebsch_gordan(k, l, J)
        r = so3.random_rotation(rng)
        dk, dl, dj = so3.wigner_d(k, r), so3.wigner_d(l, r), so3.wigner_d(J, r)
        lhs = np.einsum("nm,nab->mab", dj, q)
        rhs = np.einsum("ab,mbc,dc->mad", dk, q, dl)
        dev = max(dev, float(np.abs(lhs - rhs).max()))
    checks.append(_check("cg_intertwiner", dev, tol, draws=draws))

    dev = 0.0
    for i in range(draws):
        J = i % 4
        x = _unit(rng)
        r = so3.random_rotation(rng)
        lhs = so3.real_sph_harm(J, (r @ x[:, None])[:, 0])
        rhs = so3.wigner_d(J, r) @ so3.real_sph_harm(J, x)
        dev = max(dev, float(np.abs(lhs - rhs).max()))
    checks.append(_check("harmonic_rotation", dev, tol, draws=draws))

    dev = 0.0
    for i in range(draws):
        k, l, J = pairs[i % len(pairs)]
        x = _unit(rng)
        r = so3.random_rotation(rng)
        lhs = so3.angular_kernel_basis(k, l, J, (r @ x[:, None])[:, 0])
        rhs = so3.wigner_d(k, r) @ so3.angular_kernel_basis(k, l, J, x) @ so3.wigner_d(l, r).T
        dev = max(dev, float(np.abs(lhs - rhs).max()))
    checks.append(_check("kernel_rotation", dev, tol, draws=draws))

    return _report("so3", seed, checks)


def _unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# layer suite


_T1 = fb.FiberType(((1, 1),))
_T44 = fb.FiberType(((0, 4), (1, 4)))


def _type1_fibers(feats):
    return fb.Fibers(_T1, {1: fb.vectors_to_type1(feats)[:, None, :]})


def _random_block(rng, query_in, kv_in, out_type, heads=2):
    return at.AttentionBlockParams.init(
        rng, heads, query_in, kv_in, _T44, _T44, out_type, radial_hidden=5
    )


def _fiber_dev(got: fb.Fibers, want: fb.Fibers) -> float:
    dev = 0.0
    for l in want.ftype.ls:
        dev = max(dev, float(np.abs(got.block_value(l) - want.block_value(l)).max()))
    return dev


def suite_layers(seed=0, tol=1e-6, transforms=5):
    """Single blocks and small stacks stay equivariant with random weights."""
    rng = np.random.default_rng(seed)
    checks = []
    blocks = [
        _random_block(rng, _T1, _T1, _T44),
        _random_block(rng, _T44, _T44, _T44),
    ]
    points = rng.standard_normal((25, 3))

    def stack(pts):
        nbrs = geo.all_neighborhoods(pts, 6)
        edges = at.build_edge_set(
            pts, pts, [n.indices for n in nbrs], [0, 1], [0, 1]
        )
        f = _type1_fibers(geo.input_features(pts, nbrs))
        for b in blocks:
            f = at.attention_block(b, edges, f, f)
        return f

    base = stack(points)
    dev = 0.0
    for _ in range(transforms):
        g = geo.random_se3(rng, translation_scale=1.5)
        dev = max(dev, _fiber_dev(stack(g.apply(points)), base.transform(g.rotation)))
    checks.append(_check("self_attention_equivariance", dev, tol, transforms=transforms))

    params = _random_block(rng, _T1, _T1, _T44)
    query = np.array([0.3, -0.2, 0.5])

    def cross(pts, q):
        nbrs = geo.all_neighborhoods(pts, 4)
        f = _type1_fibers(geo.input_features(pts, nbrs))
        cand = geo.query_candidates(pts, q, 4)[0]
        f_q = fb.FiberVec(_T1, fb.vectors_to_type1(cand.feature))
        return at.cross_attention_layer(f, pts, q, f_q, cand.neighborhood, params)

    base_v = cross(points, query)
    dev = 0.0
    for _ in range(transforms):
        g = geo.random_se3(rng, translation_scale=1.5)
        moved = cross(g.apply(points), g.apply(query[None])[0])
        want = fb.fiber_rep_matrix(base_v.ftype, g.rotation) @ base_v.data
        dev = max(dev, float(np.abs(moved.data - want).max()))
    checks.append(_check("cross_attention_equivariance", dev, tol, transforms=transforms))

    f = fb.Fibers(_T44, {0: rng.standard_normal((7, 4, 1)),
                         1: rng.standard_normal((7, 4, 3))})
    scales = {0: rng.uniform(0.5, 1.5, (1, 4)), 1: rng.uniform(0.5, 1.5, (1, 4))}
    base_n = fb.equiv_layer_norm(f, scales)
    dev = 0.0
    for _ in range(transforms):
        r = so3.random_rotation(rng)
        got = fb.equiv_layer_norm(f.transform(r), scales)
        dev = max(dev, _fiber_dev(got, base_n.transform(r)))
    checks.append(_check("layer_norm_equivariance", dev, tol, transforms=transforms))

    return _report("layers", seed, checks)


# ---------------------------------------------------------------------------
# model suite


def suite_model(seed=0, tol=1e-5, transforms=20, points=300, queries=64,
                cfg: model.ModelConfig | None = None, permutations=10):
    """Full-pipeline invariance under SE(3) moves and point relabeling."""
    if cfg is None:
        cfg = model.ModelConfig(seed=seed)
    rng = np.random.default_rng(seed)
    params = model.init_params(cfg, seed=seed, dtype=np.float64)
    pts = rng.uniform(-0.5, 0.5, (points, 3))
    qs = rng.uniform(-0.6, 0.6, (queries, 3))
    base = model.occupancy_many(pts, qs, cfg, params)
    checks = []

    dev = 0.0
    for _ in range(transforms):
        g = geo.random_se3(rng, translation_scale=2.0)
        moved = model.occupancy_many(g.apply(pts), g.apply(qs), cfg, params)
        dev = max(dev, float(np.abs(moved - base).max()))
    checks.append(_check("occupancy_se3_invariance", dev, tol, transforms=transforms))

    dev = 0.0
    for _ in range(permutations):
        perm = rng.permutation(len(pts))
        permed = model.occupancy_many(pts[perm], qs, cfg, params)
        dev = max(dev, float(np.abs(permed - base).max()))
    # bit-identity contract: any nonzero deviation fails
    checks.append(_check("occupancy_permutation_bitwise", dev, 0.0,
                         permutations=permutations))

    return _report("model", seed, checks)


# ---------------------------------------------------------------------------
# gradient suite


def suite_grad(seed=0, rtol=1e-4, atol=1e-6, points=10, queries=4,
               cfg: model.ModelConfig | None = None, elements_per_tensor=None):
    """Analytic gradients against central finite differences in f64."""
    if cfg is None:
        cfg = model.ModelConfig(
            enc_layers=2, dec_layers=2, heads=2, mult=8, k=4,
            dec_out_scalars=8, radial_hidden=4, seed=seed,
        )
    rng = np.random.default_rng(seed)
    tcfg = training.TrainConfig(
        batch=1, iterations=1, queries_per_item=queries, input_points=points,
        seed=seed,
    )
    item = training.sample_training_item(data_io.sphere(0.4), tcfg, rng)
    rep = training.finite_difference_report(
        cfg, [item], rtol=rtol, atol=atol,
        elements_per_tensor=elements_per_tensor, seed=seed,
    )
    check = {
        "name": "finite_difference_agreement",
        "max_dev": float(rep["max_rel_err"]),
        "tol": float(rtol),
        "ok": bool(rep["ok"]),
        "checked": rep["checked"],
        "max_abs_err": rep["max_abs_err"],
        "detached": list(rep["detached"]),
        "failures": [list(f) for f in rep["failures"]],
    }
    return _report("grad", seed, [check])


# ---------------------------------------------------------------------------
# dispatch and fault injection


SUITES = {
    "so3": suite_so3,
    "layers": suite_layers,
    "model": suite_model,
    "grad": suite_grad,
}


def run_suite(name, seed=0, tol=None, **kwargs):
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    if tol is not None:
        if name == "grad":
            kwargs.setdefault("rtol", tol)
        else:
            kwargs.setdefault("tol", tol)
    return SUITES[name](seed=seed, **kwargs)


@contextmanager
def corrupted_cg(k=1, l=1, J=1, m=0):
    """Flip the sign of one Clebsch-Gordan m-slice while the context is open.

    The coupling constants are derived, not stored, so fault injection happens
    at their cache; geometry built inside the context bakes the bad constant
    into its angular kernels, and the model suite must then fail.
    """
    orig = so3._clebsch_gordan_cached

    def bad(kk, ll, JJ):
        q = orig(kk, ll, JJ)
        if (kk, ll, JJ) == (k, l, J):
            q = q.copy()
            q[m] = -q[m]
            q.setflags(write=False)
        return q

    so3._clebsch_gordan_cached = bad
    try:
        yield
    finally:
        so3._clebsch_gordan_cached = orig
