"""Point-cloud geometry: rigid transforms, tie-inclusive k-NN, input features.

Neighbourhoods include the anchor itself (distance zero) and every point
whose distance ties the k-th smallest within a relative tolerance of
``1e-9 * d_k``.  Members are returned in a canonical order, sorted by
(distance, x, y, z); that ordering is a function of the geometry alone, which
is what makes downstream reductions bit-identical under any permutation of
the input points.

The hand-designed input feature for a point is the offset from the centroid
of its neighbourhood, ``f_i = x_i - centroid(N_i)`` -- a type-1 quantity that
is exactly translation invariant and rotates with the cloud.  Queries get the
same treatment relative to the neighbourhood of their closest cloud point;
when several points tie as closest the query keeps one candidate entry per
tied neighbourhood (downstream scoring combines them by max).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .so3 import check_rotation, random_rotation

__all__ = [
    "SE3",
    "random_se3",
    "as_points",
    "knn_neighborhood",
    "all_neighborhoods",
    "input_features",
    "query_candidates",
    "query_candidates_many",
    "equivariant_zone",
    "load_xyz",
    "save_xyz",
    "Neighborhood",
    "QueryCandidate",
]

TIE_RTOL = 1e-9


@dataclass(frozen=True)
class SE3:
    """Rigid motion ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation, tol=1e-9))
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("translation must be a finite (3,) vector")
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity():
        return SE3(np.eye(3), np.zeros(3))

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "SE3") -> "SE3":
        # (t1, r1) . (t2, r2) = (t1 + r1 t2, r1 r2)
        return SE3(self.rotation @ other.rotation, self.translation + self.rotation @ other.translation)

    def inverse(self) -> "SE3":
        return SE3(self.rotation.T, -self.rotation.T @ self.translation)


def random_se3(rng, translation_scale=1.0):
    """Haar rotation plus a uniform translation in ``[-s, s]^3``."""
    return SE3(random_rotation(rng), rng.uniform(-translation_scale, translation_scale, 3))


def as_points(arr, name="points"):
    """Validate an ``(N, 3)`` float array of finite coordinates."""
    pts = np.asarray(arr, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class Neighborhood:
    """Members of one tie-inclusive k-NN set, in canonical order."""

    indices: np.ndarray  # (n,) int, sorted by (distance, x, y, z)
    cutoff: float  # the k-th smallest distance d_k


@dataclass(frozen=True)
class QueryCandidate:
    """One tied closest-point candidate for a query."""

    point_index: int
    neighborhood: Neighborhood
    feature: np.ndarray  # type-1 query feature, q - centroid(N)


def _canonical_order(dist, points):
    # Primary key distance, then x, y, z: a pure function of the geometry.
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0], dist))


def _tie_select(dist, points, k):
    dk = np.partition(dist, k - 1)[k - 1]
    members = np.flatnonzero(dist <= dk + TIE_RTOL * dk)
    order = _canonical_order(dist[members], points[members])
    return members[order], float(dk)


def knn_neighborhood(points, anchor, k):
    """Tie-inclusive k-nearest-neighbour set of ``points[anchor]``.

    The anchor itself is a member (distance zero).  Every point within
    ``d_k (1 + 1e-9)`` of the anchor is included, where ``d_k`` is the k-th
    smallest anchor distance.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if not 0 <= anchor < n:
        raise ValueError(f"anchor index {anchor} out of range for {n} points")
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= N (= {n}), got {k}")
    dist = np.linalg.norm(pts - pts[anchor], axis=1)
    members, dk = _tie_select(dist, pts, k)
    return Neighborhood(members, dk)


def all_neighborhoods(points, k):
    """k-NN sets for every point; one O(N^2) distance pass."""
    pts = as_points(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= N (= {n}), got {k}")
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    dist = np.sqrt(d2)
    out = []
    for i in range(n):
        members, dk = _tie_select(dist[i], pts, k)
        out.append(Neighborhood(members, dk))
    return out


def input_features(points, neighborhoods):
    """Centroid-offset features ``f_i = x_i - centroid(N_i)``, shape (N, 3)."""
    pts = as_points(points)
    feats = np.empty_like(pts)
    for i, nb in enumerate(neighborhoods):
        feats[i] = pts[i] - pts[nb.indices].mean(axis=0)
    return feats


def query_candidates(points, query, k):
    """Closest-point candidates of a query, one per tied neighbourhood.

    Returns a list of :class:`QueryCandidate` in canonical candidate order
    (distance to query, then candidate coordinates).  Generic queries produce
    a single entry; queries equidistant from several cloud points produce one
    entry per tie, each carrying that candidate's neighbourhood and the query
    feature ``q - centroid(N_c)``.
    """
    pts = as_points(points)
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (3,):
        raise ValueError(f"query must have shape (3,), got {q.shape}")
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"k must satisfy 1 <= k <= N (= {pts.shape[0]}), got {k}")
    dist = np.linalg.norm(pts - q, axis=1)
    dmin = dist.min()
    cands = np.flatnonzero(dist <= dmin + TIE_RTOL * dmin)
    cands = cands[_canonical_order(dist[cands], pts[cands])]
    out = []
    for c in cands:
        nb = knn_neighborhood(pts, int(c), k)
        feat = q - pts[nb.indices].mean(axis=0)
        out.append(QueryCandidate(int(c), nb, feat))
    return out


def query_candidates_many(points, queries, k, chunk=1024):
    """Candidates for a batch of queries, one list per query.

    Equivalent to ``[query_candidates(points, q, k) for q in queries]`` but
    computes query distances in blocks and reuses each cloud point's
    neighbourhood across all queries that select it.
    """
    pts = as_points(points)
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != 3:
        raise ValueError(f"queries must have shape (M, 3), got {qs.shape}")
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"k must satisfy 1 <= k <= N (= {pts.shape[0]}), got {k}")
    cache: dict = {}
    out = []
    for a in range(0, qs.shape[0], chunk):
        block = qs[a : a + chunk]
        dist = np.linalg.norm(block[:, None, :] - pts[None, :, :], axis=-1)
        for row, q in zip(dist, block):
            dmin = row.min()
            cands = np.flatnonzero(row <= dmin + TIE_RTOL * dmin)
            cands = cands[_canonical_order(row[cands], pts[cands])]
            entries = []
            for c in cands:
                c = int(c)
                nb = cache.get(c)
                if nb is None:
                    nb = cache[c] = knn_neighborhood(pts, c, k)
                feat = q - pts[nb.indices].mean(axis=0)
                entries.append(QueryCandidate(c, nb, feat))
            out.append(entries)
    return out


def equivariant_zone(points1, center1, points2, center2):
    """Radius ``D1`` of the guaranteed-invariant query ball around cloud 1.

    With ``d2`` the radius of cloud 2's bounding sphere about ``center2``, the
    segment from ``center1`` to ``center2`` meets that sphere at a point ``p``
    (the intersection nearer ``center1``), and ``D1`` is the distance from
    ``center1`` to the midpoint of ``center1``--``p``: queries closer to
    ``center1`` than ``D1`` are provably nearer every point of cloud 1 than
    any point of cloud 2.

    Raises ``ValueError`` when ``center1`` lies inside cloud 2's bounding
    sphere (no separating zone exists).
    """
    p2 = as_points(points2, "points2")
    c1 = np.asarray(center1, dtype=np.float64)
    c2 = np.asarray(center2, dtype=np.float64)
    if c1.shape != (3,) or c2.shape != (3,):
        raise ValueError("centers must have shape (3,)")
    d2 = float(np.linalg.norm(p2 - c2, axis=1).max())
    sep = float(np.linalg.norm(c1 - c2))
    if sep <= d2:
        raise ValueError(
            f"degenerate geometry: center1 is inside cloud 2's bounding sphere "
            f"(separation {sep:.6g} <= radius {d2:.6g})"
        )
    u = (c1 - c2) / sep
    p = c2 + d2 * u
    return float(np.linalg.norm(c1 - p) / 2.0)


def load_xyz(path):
    """Read an ``x y z`` per-line text point cloud."""
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.size == 0:
        raise ValueError(f"{path}: empty point cloud")
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return as_points(pts, str(path))


def save_xyz(path, points):
    """Write points as ``x y z`` lines with full float precision."""
    np.savetxt(path, as_points(points), fmt="%.17g")
