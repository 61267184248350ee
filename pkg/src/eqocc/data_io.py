"""Ground-truth generators: analytic shape oracles, mesh oracles, scenes.

Every oracle answers two questions exactly: is a point inside, and what does
the surface look like (uniform area-weighted samples).  Inside tests run in
the shape's local frame after undoing the pose, so posing an oracle and
posing the query commute by construction.  Scenes are unions of posed
oracles with pairwise disjoint bounding spheres; their occupancy is the
pointwise OR of the members.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import SE3, as_points
from .recon import Mesh, is_watertight, load_obj, sample_mesh_surface
from .so3 import random_rotation

__all__ = [
    "ShapeOracle",
    "Scene",
    "sphere",
    "box",
    "torus",
    "mesh_shape",
    "with_pose",
    "analytic_occupancy",
    "mesh_occupancy",
    "mesh_occupancy_many",
    "random_shape",
    "compose_scene",
    "padded_bbox",
    "save_xyz",
    "load_xyz",
    "scene_manifest",
    "save_manifest",
    "load_scene",
]

KINDS = ("sphere", "box", "torus", "mesh")


@dataclass
class ShapeOracle:
    """A solid shape: local-frame geometry plus a rigid pose."""

    kind: str
    params: dict
    pose: SE3 = field(default_factory=SE3.identity)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.kind == "mesh":
            mesh = self.params["mesh"]
            if not is_watertight(mesh):
                raise ValueError("mesh oracle requires a watertight mesh")

    # -- local-frame geometry ------------------------------------------------

    def _contains_local(self, pts):
        p = self.params
        if self.kind == "sphere":
            return np.linalg.norm(pts, axis=1) <= p["radius"]
        if self.kind == "box":
            h = np.asarray(p["half_extents"], dtype=np.float64)
            return np.all(np.abs(pts) <= h, axis=1)
        if self.kind == "torus":
            ring, tube = p["ring"], p["tube"]
            s = np.hypot(pts[:, 0], pts[:, 1]) - ring
            return s**2 + pts[:, 2] ** 2 <= tube**2
        return mesh_occupancy_many(p["mesh"], pts, seed=p.get("seed", 0))

    def implicit(self, points):
        """Signed surface function in the world frame, zero on the surface.

        Analytic kinds only; used to verify samplers hit the level set.
        """
        pts = self.pose.inverse().apply(as_points(points))
        p = self.params
        if self.kind == "sphere":
            return np.linalg.norm(pts, axis=1) - p["radius"]
        if self.kind == "box":
            h = np.asarray(p["half_extents"], dtype=np.float64)
            return (np.abs(pts) - h).max(axis=1)
        if self.kind == "torus":
            s = np.hypot(pts[:, 0], pts[:, 1]) - p["ring"]
            return np.hypot(s, pts[:, 2]) - p["tube"]
        raise ValueError("mesh oracles have no analytic implicit function")

    def _sample_local(self, rng, n):
        p = self.params
        if self.kind == "sphere":
            u = rng.standard_normal((n, 3))
            norms = np.linalg.norm(u, axis=1)
            while np.any(norms == 0):  # essentially impossible, but exact
                bad = norms == 0
                u[bad] = rng.standard_normal((int(bad.sum()), 3))
                norms = np.linalg.norm(u, axis=1)
            return u * (p["radius"] / norms)[:, None]
        if self.kind == "box":
            h = np.asarray(p["half_extents"], dtype=np.float64)
            a, b, c = h
            face_w = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
            face = rng.choice(6, size=n, p=face_w / face_w.sum())
            pts = rng.uniform(-1.0, 1.0, (n, 3)) * h
            axis = face // 2
            sign = np.where(face % 2 == 0, 1.0, -1.0)
            pts[np.arange(n), axis] = sign * h[axis]
            return pts
        if self.kind == "torus":
            ring, tube = p["ring"], p["tube"]
            phi = rng.uniform(0.0, 2.0 * np.pi, n)
            theta = np.empty(n)
            # area element is prop. to ring + tube*cos(theta): rejection sample
            need = np.arange(n)
            while need.size:
                cand = rng.uniform(0.0, 2.0 * np.pi, need.size)
                accept = rng.random(need.size) <= (ring + tube * np.cos(cand)) / (
                    ring + tube
                )
                theta[need[accept]] = cand[accept]
                need = need[~accept]
            rad = ring + tube * np.cos(theta)
            return np.stack(
                [rad * np.cos(phi), rad * np.sin(phi), tube * np.sin(theta)], axis=1
            )
        seed = int(rng.integers(2**63))
        return sample_mesh_surface(p["mesh"], n, seed)

    def _local_bbox(self):
        p = self.params
        if self.kind == "sphere":
            r = p["radius"]
            return -np.full(3, r), np.full(3, r)
        if self.kind == "box":
            h = np.asarray(p["half_extents"], dtype=np.float64)
            return -h, h
        if self.kind == "torus":
            ring, tube = p["ring"], p["tube"]
            ext = np.array([ring + tube, ring + tube, tube])
            return -ext, ext
        v = p["mesh"].vertices
        return v.min(axis=0), v.max(axis=0)

    # -- world-frame API -----------------------------------------------------

    def contains(self, points):
        """Boolean inside test (boundary inclusive), any (N, 3) batch."""
        pts = self.pose.inverse().apply(as_points(points))
        return self._contains_local(pts)

    def sample_surface(self, rng, n):
        """n uniform area-weighted surface points in the world frame."""
        return self.pose.apply(self._sample_local(rng, n))

    def bbox(self):
        """World-frame axis-aligned bounding box (conservative under pose)."""
        if self.kind == "sphere":
            c = self.pose.translation
            r = self.params["radius"]
            return c - r, c + r
        lo, hi = self._local_bbox()
        corners = np.array(
            [
                [x, y, z]
                for x in (lo[0], hi[0])
                for y in (lo[1], hi[1])
                for z in (lo[2], hi[2])
            ]
        )
        world = self.pose.apply(corners)
        return world.min(axis=0), world.max(axis=0)

    def bounding_sphere(self):
        """(center, radius) enclosing the shape, for disjointness checks."""
        p = self.params
        if self.kind == "sphere":
            r = p["radius"]
        elif self.kind == "box":
            r = float(np.linalg.norm(p["half_extents"]))
        elif self.kind == "torus":
            r = p["ring"] + p["tube"]
        else:
            r = float(np.linalg.norm(p["mesh"].vertices, axis=1).max())
        return self.pose.translation.copy(), r


def sphere(radius=0.5, pose=None) -> ShapeOracle:
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    return ShapeOracle("sphere", {"radius": float(radius)}, pose or SE3.identity())


def box(half_extents=(0.5, 0.5, 0.5), pose=None) -> ShapeOracle:
    h = np.asarray(half_extents, dtype=np.float64)
    if h.shape != (3,) or np.any(h <= 0):
        raise ValueError(f"half extents must be three positive values, got {h}")
    return ShapeOracle("box", {"half_extents": tuple(map(float, h))}, pose or SE3.identity())


def torus(ring=0.35, tube=0.15, pose=None) -> ShapeOracle:
    if not 0 < tube < ring:
        raise ValueError(f"need 0 < tube < ring, got tube={tube}, ring={ring}")
    return ShapeOracle(
        "torus", {"ring": float(ring), "tube": float(tube)}, pose or SE3.identity()
    )


def mesh_shape(mesh: Mesh, pose=None, path=None, seed=0) -> ShapeOracle:
    params = {"mesh": mesh, "seed": int(seed)}
    if path is not None:
        params["path"] = str(path)
    return ShapeOracle("mesh", params, pose or SE3.identity())


def with_pose(oracle: ShapeOracle, g: SE3) -> ShapeOracle:
    """The same shape, additionally transformed by g."""
    return ShapeOracle(oracle.kind, oracle.params, g.compose(oracle.pose))


def analytic_occupancy(oracle: ShapeOracle, q) -> int:
    """Exact {0,1} inside test for a single query point."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (3,):
        raise ValueError(f"query must have shape (3,), got {q.shape}")
    return int(oracle.contains(q[None])[0])


# ---------------------------------------------------------------------------
# mesh occupancy by ray parity


def _ray_crossings(mesh: Mesh, origin, direction):
    """(crossing count, marginal flag) for one ray against all triangles."""
    a = mesh.vertices[mesh.triangles[:, 0]]
    e1 = mesh.vertices[mesh.triangles[:, 1]] - a
    e2 = mesh.vertices[mesh.triangles[:, 2]] - a
    p = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    s = origin - a
    u = np.einsum("ij,ij->i", s, p) * inv
    qv = np.cross(s, e1)
    v = np.einsum("j,ij->i", direction, qv) * inv
    t = np.einsum("ij,ij->i", e2, qv) * inv
    w = 1.0 - u - v
    hits = ok & (u > 0) & (v > 0) & (w > 0) & (t > 1e-12)
    near = ok & (t > 1e-12) & (
        (np.abs(u) < 1e-10) | (np.abs(v) < 1e-10) | (np.abs(w) < 1e-10)
    )
    return int(hits.sum()), bool(near.any())


def mesh_occupancy(mesh: Mesh, q, seed=0) -> int:
    """Inside test by ray parity; direction jittered per query.

    Rays grazing an edge or vertex are rejected and recast with the next
    jitter, so the answer is deterministic per (query, seed).  A query
    exactly on a face counts crossings of the remaining surface only.
    """
    return int(mesh_occupancy_many(mesh, np.asarray(q, dtype=np.float64)[None], seed)[0])


def mesh_occupancy_many(mesh: Mesh, points, seed=0):
    if not is_watertight(mesh):
        raise ValueError("occupancy needs a watertight mesh (open edges found)")
    pts = as_points(points)
    out = np.zeros(len(pts), dtype=bool)
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    inside_box = np.all((pts >= lo) & (pts <= hi), axis=1)
    for i in np.flatnonzero(inside_box):
        q = pts[i]
        # per-query deterministic jitter stream
        key = np.frombuffer(q.tobytes(), dtype=np.uint64)
        rng = np.random.default_rng([int(seed) & (2**63 - 1), *map(int, key)])
        crossings = 0
        for _ in range(16):
            d = rng.standard_normal(3)
            norm = np.linalg.norm(d)
            if norm == 0:
                continue
            crossings, marginal = _ray_crossings(mesh, q, d / norm)
            if not marginal:
                out[i] = crossings % 2 == 1
                break
        else:
            out[i] = crossings % 2 == 1
    return out


# ---------------------------------------------------------------------------
# randomized shapes and scenes


def random_shape(rng, kinds=("sphere", "box", "torus")) -> ShapeOracle:
    """A randomly sized shape in canonical pose, fitting the unit cube."""
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "sphere":
        return sphere(radius=rng.uniform(0.25, 0.5))
    if kind == "box":
        return box(half_extents=rng.uniform(0.15, 0.5, 3))
    if kind == "torus":
        ring = rng.uniform(0.2, 0.35)
        tube = rng.uniform(0.08, min(0.15, 0.5 - ring))
        return torus(ring=ring, tube=tube)
    raise ValueError(f"cannot randomize kind {kind!r}")


@dataclass
class Scene:
    """Union of posed shapes; occupancy is the pointwise OR."""

    objects: list

    def __post_init__(self):
        if not self.objects:
            raise ValueError("scene needs at least one object")

    def contains(self, points):
        pts = as_points(points)
        out = np.zeros(len(pts), dtype=bool)
        for obj in self.objects:
            out |= obj.contains(pts)
        return out

    def sample_surface(self, rng, n_per_object):
        """Per-object surface samples, concatenated in object order."""
        return np.vstack([obj.sample_surface(rng, n_per_object) for obj in self.objects])

    def bbox(self):
        los, his = zip(*(obj.bbox() for obj in self.objects))
        return np.min(los, axis=0), np.max(his, axis=0)


def compose_scene(oracles, bounds, m, seed, min_gap=0.0) -> Scene:
    """m posed copies drawn round-robin from oracles, spheres disjoint.

    Each object gets a Haar-random rotation and a translation rejection
    sampled inside bounds until all pairwise bounding-sphere gaps exceed
    min_gap.  Fails after 10^4 rejected placements.
    """
    if m < 1:
        raise ValueError(f"need at least one object, got {m}")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if not np.all(hi > lo):
        raise ValueError("degenerate scene bounds")
    rng = np.random.default_rng(seed)
    placed = []
    centers = []
    radii = []
    tries = 0
    for i in range(m):
        base = oracles[i % len(oracles)]
        c0, r = base.bounding_sphere()
        if np.any(lo + r > hi - r):
            raise ValueError("bounds too tight for object radius")
        rot = random_rotation(rng)
        while True:
            t = rng.uniform(lo + r, hi - r)
            center = rot @ c0 + t  # bounding-sphere center after the new pose
            ok = np.all(center >= lo + r) and np.all(center <= hi - r)
            ok = ok and all(
                np.linalg.norm(center - c) - r - rc > min_gap
                for c, rc in zip(centers, radii)
            )
            if ok:
                break
            tries += 1
            if tries > 10_000:
                raise ValueError(
                    f"could not place object {i} after 10000 tries; bounds too tight"
                )
        g = SE3(rot, t)
        placed.append(with_pose(base, g))
        centers.append(center)
        radii.append(r)
    return Scene(placed)


def padded_bbox(lo, hi, pad=0.1):
    """Box grown by a fraction of its extent on every side."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    return lo - pad * ext, hi + pad * ext


# ---------------------------------------------------------------------------
# point cloud files


def save_xyz(path, points):
    """Whitespace-separated ``x y z`` per line."""
    pts = as_points(points)
    with open(path, "w") as f:
        for x, y, z in pts:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_xyz(path):
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) < 3:
                raise ValueError(f"{path}:{ln}: expected 3 coordinates, got {body!r}")
            rows.append([float(v) for v in parts[:3]])
    if not rows:
        raise ValueError(f"{path}: no points")
    return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# manifests


def _oracle_record(obj: ShapeOracle) -> dict:
    params = {}
    for k, v in obj.params.items():
        if k == "mesh":
            continue
        params[k] = v
    if obj.kind == "mesh" and "path" not in params:
        raise ValueError("mesh oracle without a source path cannot be serialized")
    return {
        "kind": obj.kind,
        "params": params,
        "rotation": [float(x) for x in obj.pose.rotation.reshape(-1)],
        "translation": [float(x) for x in obj.pose.translation],
    }


def scene_manifest(scene: Scene, seed=None) -> dict:
    doc = {"objects": [_oracle_record(o) for o in scene.objects]}
    if seed is not None:
        doc["seed"] = int(seed)
    return doc


def save_manifest(path, scene: Scene, seed=None):
    with open(path, "w") as f:
        json.dump(scene_manifest(scene, seed), f, indent=2)
        f.write("\n")


def _oracle_from_record(rec: dict) -> ShapeOracle:
    pose = SE3(
        np.asarray(rec["rotation"], dtype=np.float64).reshape(3, 3),
        np.asarray(rec["translation"], dtype=np.float64),
    )
    kind = rec["kind"]
    params = rec["params"]
    if kind == "sphere":
        return sphere(params["radius"], pose)
    if kind == "box":
        return box(params["half_extents"], pose)
    if kind == "torus":
        return torus(params["ring"], params["tube"], pose)
    if kind == "mesh":
        mesh = load_obj(params["path"])
        return mesh_shape(mesh, pose, path=params["path"], seed=params.get("seed", 0))
    raise ValueError(f"unknown shape kind {kind!r} in manifest")


def load_scene(source) -> Scene:
    """Scene from a manifest dict or a JSON file path."""
    if isinstance(source, dict):
        doc = source
    else:
        with open(source) as f:
            doc = json.load(f)
    return Scene([_oracle_from_record(rec) for rec in doc["objects"]])
