"""End-to-end occupancy network: cloud encoder, query decoder, tie-max scoring.

The encoder runs a stack of self-attention blocks over tie-inclusive k-NN
neighbourhoods and keeps the type-1 part of the last block's output as the
per-point feature field.  The decoder attends from each query into that field
through cross-attention blocks and squashes a bank of invariant scalars to a
single occupancy score in (0, 1).  A query tied between several closest cloud
points evaluates every candidate neighbourhood and keeps the max score.

Geometry-dependent layouts (edge sets, gather/scatter plans, input features)
are prebuilt once per cloud or query batch (:class:`CloudGeometry`,
:class:`QueryBatch`) so repeated passes with changing parameters, as in a
training loop, reuse them.  Parameters live in :class:`ModelParams`; every
learnable tensor is reachable by a stable dotted name through
:func:`tensor_slots`, which is what the optimizer, the checkpoint format, and
the gradient checks all key on.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fibers as fb
from . import geometry as geo
from .attention import AttentionBlockParams, EdgeSet, attention_block, build_edge_set
from .fibers import Fibers, FiberType
from .recon import OccupancyGrid, grid_lattice

__all__ = [
    "ModelConfig",
    "ModelParams",
    "CloudGeometry",
    "QueryBatch",
    "init_params",
    "cloud_geometry",
    "query_batch",
    "run_encoder",
    "run_decoder",
    "encode",
    "occupancy",
    "occupancy_many",
    "occupancy_grid",
    "tensor_slots",
    "named_tensors",
    "set_tensors",
    "leafify_params",
    "cast_params",
    "params_dtype",
    "save_checkpoint",
    "load_checkpoint",
    "params_from_checkpoint",
    "save_config",
    "load_config",
]

CHECKPOINT_MAGIC = b"EQOC"
CHECKPOINT_VERSION = 1
RADIUS_NORM_NAME = "radius_norm"
MLP_HIDDEN = 64

# Raw geometric input: one type-1 channel (centroid offsets, query offsets).
VECTOR_INPUT = FiberType(((1, 1),))


@dataclass
class ModelConfig:
    """Architecture hyperparameters; everything a checkpoint needs to rebuild."""

    enc_layers: int = 10
    dec_layers: int = 2
    heads: int = 8
    mult: int = 32
    types: tuple = (0, 1)
    k: int = 15
    dec_out_scalars: int = 32
    occ_threshold: float = 0.2
    radial_hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        self.types = tuple(int(t) for t in self.types)
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder block")
        if self.heads < 1:
            raise ValueError(f"heads must be positive, got {self.heads}")
        if self.mult % self.heads:
            raise ValueError(
                f"multiplicity {self.mult} not divisible by {self.heads} heads"
            )
        if self.types != tuple(sorted(set(self.types))) or not {0, 1} <= set(self.types):
            raise ValueError(
                f"types must be sorted, unique, and include 0 and 1, got {self.types}"
            )
        if not 0.0 < self.occ_threshold < 1.0:
            raise ValueError(
                f"occupancy threshold must lie strictly in (0, 1), got {self.occ_threshold}"
            )
        if min(self.k, self.dec_out_scalars, self.radial_hidden) < 1:
            raise ValueError("k, dec_out_scalars, radial_hidden must be positive")

    @property
    def hidden_type(self) -> FiberType:
        return FiberType(tuple((l, self.mult) for l in self.types))

    @property
    def feature_type(self) -> FiberType:
        """Type of the per-point encoder output the decoder attends into."""
        return FiberType(((1, self.mult),))

    @property
    def scalar_type(self) -> FiberType:
        return FiberType(((0, self.dec_out_scalars),))

    def to_dict(self) -> dict:
        return {
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "heads": self.heads,
            "mult": self.mult,
            "types": list(self.types),
            "k": self.k,
            "dec_out_scalars": self.dec_out_scalars,
            "occ_threshold": self.occ_threshold,
            "radial_hidden": self.radial_hidden,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f for f in ModelConfig.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return ModelConfig(**d)


@dataclass
class ModelParams:
    """Every tensor of the model.  ``radius_norm`` is a data statistic
    (mean neighbourhood radius of the training distribution), stored and
    checkpointed but never trained."""

    enc: list  # [AttentionBlockParams] * enc_layers
    dec: list  # [AttentionBlockParams] * dec_layers
    mlp_w1: object  # (MLP_HIDDEN, dec_out_scalars)
    mlp_b1: object  # (MLP_HIDDEN,)
    mlp_w2: object  # (1, MLP_HIDDEN)
    mlp_b2: object  # (1,)
    radius_norm: np.ndarray  # (1,) float64


def init_params(cfg: ModelConfig, seed=None, dtype=np.float64) -> ModelParams:
    """Fresh parameters; one rng stream, fixed draw order, so a seed pins
    every tensor regardless of later architecture-independent code motion."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    hidden = cfg.hidden_type
    enc = []
    for i in range(cfg.enc_layers):
        q_in = VECTOR_INPUT if i == 0 else hidden
        enc.append(
            AttentionBlockParams.init(
                rng, cfg.heads, q_in, q_in, hidden, hidden, hidden,
                cfg.radial_hidden, dtype,
            )
        )
    kv = cfg.feature_type
    dec = []
    for i in range(cfg.dec_layers):
        q_in = VECTOR_INPUT if i == 0 else hidden
        out = cfg.scalar_type if i == cfg.dec_layers - 1 else hidden
        dec.append(
            AttentionBlockParams.init(
                rng, cfg.heads, q_in, kv, hidden, hidden, out,
                cfg.radial_hidden, dtype,
            )
        )
    s1 = 1.0 / math.sqrt(cfg.dec_out_scalars)
    s2 = 1.0 / math.sqrt(MLP_HIDDEN)
    return ModelParams(
        enc=enc,
        dec=dec,
        mlp_w1=rng.uniform(-s1, s1, (MLP_HIDDEN, cfg.dec_out_scalars)).astype(dtype),
        mlp_b1=np.zeros(MLP_HIDDEN, dtype=dtype),
        mlp_w2=rng.uniform(-s2, s2, (1, MLP_HIDDEN)).astype(dtype),
        mlp_b2=np.zeros(1, dtype=dtype),
        radius_norm=np.ones(1, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# geometry caches


@dataclass
class CloudGeometry:
    """Everything about a cloud the encoder needs besides parameters."""

    points: np.ndarray  # (N, 3) float64
    edges: EdgeSet  # self-attention edges, shared by all encoder blocks
    in_fibers: np.ndarray  # (N, 1, 3) type-1 components of the input features


@dataclass
class QueryBatch:
    """Candidate-expanded query batch for the decoder.

    Row c of the decoder batch is one (query, candidate neighbourhood) pair;
    ``starts[i]:starts[i+1]`` are the candidate rows of query i, in canonical
    candidate order.  Most queries have exactly one row.
    """

    starts: np.ndarray  # (n_queries + 1,)
    edges: EdgeSet  # cross-attention edges, shared by all decoder blocks
    feat: np.ndarray  # (n_candidates, 1, 3) type-1 query features


def cloud_geometry(points, cfg: ModelConfig, radius_scale=1.0, dtype=np.float64):
    pts = geo.as_points(points)
    k_eff = min(cfg.k, pts.shape[0])
    nbrs = geo.all_neighborhoods(pts, k_eff)
    edges = build_edge_set(
        pts, pts, [nb.indices for nb in nbrs], cfg.types, cfg.types,
        radius_scale, dtype,
    )
    feats = fb.vectors_to_type1(geo.input_features(pts, nbrs))
    return CloudGeometry(pts, edges, feats[:, None, :].astype(dtype))


def query_batch(points, queries, cfg: ModelConfig, radius_scale=1.0, dtype=np.float64):
    pts = geo.as_points(points)
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != 3:
        raise ValueError(f"queries must have shape (M, 3), got {qs.shape}")
    if qs.shape[0] < 1:
        raise ValueError("need at least one query")
    k_eff = min(cfg.k, pts.shape[0])
    per_query = geo.query_candidates_many(pts, qs, k_eff)
    starts = [0]
    dst_pos, feats, nbr_lists = [], [], []
    for q, cands in zip(qs, per_query):
        for c in cands:
            dst_pos.append(q)  # displacements are measured from the query
            feats.append(c.feature)
            nbr_lists.append(c.neighborhood.indices)
        starts.append(starts[-1] + len(cands))
    edges = build_edge_set(
        pts, np.asarray(dst_pos), nbr_lists, cfg.feature_type.ls, cfg.types,
        radius_scale, dtype,
    )
    feat = fb.vectors_to_type1(np.asarray(feats))[:, None, :].astype(dtype)
    return QueryBatch(np.asarray(starts, dtype=np.int64), edges, feat)


# ---------------------------------------------------------------------------
# forward passes


def run_encoder(cfg: ModelConfig, params: ModelParams, cg: CloudGeometry) -> Fibers:
    """Type-1 feature field over the cloud, ``(N, mult, 3)`` components."""
    f = Fibers(VECTOR_INPUT, {1: cg.in_fibers})
    for blk in params.enc:
        f = attention_block(blk, cg.edges, f, f)
    # only the type-1 part feeds the decoder
    return Fibers(cfg.feature_type, {1: f.blocks[1]})


def _tie_max(scores, starts):
    """Per-query max over candidate rows; identity when nothing is tied."""
    counts = np.diff(starts)
    if np.all(counts == 1):
        return scores
    pieces = []
    for i, c in enumerate(counts):
        s = int(starts[i])
        acc = ad.narrow(scores, 0, s, 1)
        for j in range(1, int(c)):
            acc = ad.maximum_fold(acc, ad.narrow(scores, 0, s + j, 1))
        pieces.append(acc)
    return ad.concat(pieces, axis=0)


def run_decoder(cfg: ModelConfig, params: ModelParams, qb: QueryBatch, f_p: Fibers):
    """Occupancy scores per query, shape ``(n_queries,)``, tie-combined."""
    f = Fibers(VECTOR_INPUT, {1: qb.feat})
    for blk in params.dec:
        f = attention_block(blk, qb.edges, f, f_p)
    n_cand = ad.value(f.blocks[0]).shape[0]
    flat = ad.reshape(f.blocks[0], (n_cand, cfg.dec_out_scalars))
    h = ad.softplus(ad.add(ad.einsum("cs,hs->ch", flat, params.mlp_w1), params.mlp_b1))
    y = ad.add(ad.einsum("ch,oh->co", h, params.mlp_w2), params.mlp_b2)
    scores = ad.sigmoid(ad.reshape(y, (n_cand,)))
    return _tie_max(scores, qb.starts)


def params_dtype(params: ModelParams):
    return np.asarray(ad.value(params.mlp_w1)).dtype


def _radius_scale(params: ModelParams) -> float:
    return float(np.asarray(params.radius_norm).reshape(-1)[0])


def encode(points, cfg: ModelConfig, params: ModelParams):
    """Per-point features as ``(point, fiber vector)`` pairs."""
    dtype = params_dtype(params)
    with ad.no_grad():
        cg = cloud_geometry(points, cfg, _radius_scale(params), dtype)
        f_p = run_encoder(cfg, params, cg)
    return [(cg.points[i].copy(), f_p.to_vec(i)) for i in range(cg.points.shape[0])]


def occupancy_many(points, queries, cfg: ModelConfig, params: ModelParams, chunk=2048):
    """Occupancy scores for a batch of queries against one cloud, (M,)."""
    pts = geo.as_points(points)
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != 3:
        raise ValueError(f"queries must have shape (M, 3), got {qs.shape}")
    dtype = params_dtype(params)
    rs = _radius_scale(params)
    out = np.empty(qs.shape[0], dtype=np.float64)
    with ad.no_grad():
        cg = cloud_geometry(pts, cfg, rs, dtype)
        f_p = run_encoder(cfg, params, cg)
        for a in range(0, qs.shape[0], chunk):
            qb = query_batch(pts, qs[a : a + chunk], cfg, rs, dtype)
            out[a : a + chunk] = np.asarray(
                run_decoder(cfg, params, qb, f_p), dtype=np.float64
            )
    return out


def occupancy(points, query, cfg: ModelConfig, params: ModelParams) -> float:
    """Occupancy score of a single query point.

    Routed through the batch path so pointwise and grid evaluation are the
    same code, bit for bit.
    """
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (3,):
        raise ValueError(f"query must have shape (3,), got {q.shape}")
    return float(occupancy_many(points, q[None, :], cfg, params)[0])


def occupancy_grid(
    points, bbox_min, bbox_max, resolution, cfg: ModelConfig, params: ModelParams,
    chunk=2048,
) -> OccupancyGrid:
    """Evaluate the field on a regular lattice; values stored x-fastest."""
    if np.isscalar(resolution):
        resolution = (int(resolution),) * 3
    resolution = tuple(int(r) for r in resolution)
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    if bbox_min.shape != (3,) or bbox_max.shape != (3,):
        raise ValueError("bounding box corners must have shape (3,)")
    if not np.all(bbox_max > bbox_min):
        raise ValueError("bounding box is degenerate")
    if len(resolution) != 3 or min(resolution) < 2:
        raise ValueError(f"resolution must be >= 2 per axis, got {resolution}")
    lattice = grid_lattice(bbox_min, bbox_max, resolution)
    values = occupancy_many(points, lattice, cfg, params, chunk)
    return OccupancyGrid(bbox_min, bbox_max, resolution, values.astype(np.float32))


# ---------------------------------------------------------------------------
# named tensor access


@dataclass
class Slot:
    """One learnable tensor: stable name plus getter/setter into the params."""

    name: str
    get: object
    set: object


def _dict_slot(name, container, key):
    return Slot(
        name,
        lambda c=container, k=key: c[k],
        lambda v, c=container, k=key: c.__setitem__(k, v),
    )


def _attr_slot(name, obj, attr):
    return Slot(
        name,
        lambda o=obj, a=attr: getattr(o, a),
        lambda v, o=obj, a=attr: setattr(o, a, v),
    )


def _block_slots(prefix, blk: AttentionBlockParams):
    for tag, lin in (("wq", blk.w_q), ("wp", blk.w_p), ("wskip", blk.w_skip)):
        for l in sorted(lin.weights):
            yield _dict_slot(f"{prefix}.{tag}.l{l}", lin.weights, l)
    for tag, ker in (("key", blk.key_kernel), ("value", blk.value_kernel)):
        for k, l in sorted(ker.stacks):
            st = ker.stacks[(k, l)]
            for part in ("w0", "b0", "w1", "b1", "w2", "b2"):
                yield _attr_slot(f"{prefix}.{tag}.k{k}l{l}.{part}", st, part)
    for l in sorted(blk.ln_scales):
        yield _dict_slot(f"{prefix}.ln.l{l}", blk.ln_scales, l)


def tensor_slots(params: ModelParams):
    """All learnable tensors as named slots, in a fixed order.

    ``radius_norm`` is deliberately absent: it is not learnable.
    """
    slots = []
    for i, blk in enumerate(params.enc):
        slots.extend(_block_slots(f"enc.{i}", blk))
    for i, blk in enumerate(params.dec):
        slots.extend(_block_slots(f"dec.{i}", blk))
    for attr in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
        slots.append(_attr_slot(f"mlp.{attr[4:]}", params, attr))
    names = [s.name for s in slots]
    assert len(names) == len(set(names)), "duplicate tensor names"
    return slots


def named_tensors(params: ModelParams) -> dict:
    """Current values of every learnable tensor, name -> ndarray."""
    return {s.name: np.asarray(ad.value(s.get())) for s in tensor_slots(params)}


def set_tensors(params: ModelParams, mapping: dict, dtype=None):
    """Install tensors by name; every slot must be covered, shapes must match."""
    slots = tensor_slots(params)
    have = set(mapping)
    want = {s.name for s in slots}
    if have != want:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise ValueError(
            f"tensor name mismatch: missing {missing[:4]}, extra {extra[:4]}"
        )
    for s in slots:
        cur = np.asarray(ad.value(s.get()))
        new = np.asarray(mapping[s.name])
        if new.shape != cur.shape:
            raise ValueError(
                f"{s.name}: shape {new.shape} does not match expected {cur.shape}"
            )
        s.set(new.astype(dtype) if dtype is not None else new)


def leafify_params(params: ModelParams) -> dict:
    """Wrap every learnable tensor as an autodiff leaf, in place.

    Returns name -> leaf node; gradients land on these after a backward pass.
    """
    leaves = {}
    for s in tensor_slots(params):
        node = ad.leaf(np.asarray(ad.value(s.get())))
        s.set(node)
        leaves[s.name] = node
    return leaves


def cast_params(params: ModelParams, dtype):
    """Cast every learnable tensor (in place); drops any autodiff wrapping."""
    for s in tensor_slots(params):
        s.set(np.asarray(ad.value(s.get())).astype(dtype))
    return params


# ---------------------------------------------------------------------------
# checkpoints

# Layout: magic "EQOC", u32 version, u32 tensor count, then per tensor
# u32 name length, utf-8 name, u32 rank, u32 dims..., f32 data.
# All integers and floats little-endian; tensors stored as f32.


def save_checkpoint(path, params: ModelParams):
    tensors = named_tensors(params)
    tensors[RADIUS_NORM_NAME] = np.asarray(params.radius_norm)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            blob = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as name -> float32 ndarray."""
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off : off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", view, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", view, off)
            off += 4 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(view, dtype="<f4", count=n, offset=off)
            off += 4 * n
            out[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out


def params_from_checkpoint(cfg: ModelConfig, path, dtype=np.float64) -> ModelParams:
    """Rebuild parameters from a checkpoint; shapes are validated against cfg."""
    arrays = load_checkpoint(path)
    if RADIUS_NORM_NAME not in arrays:
        raise ValueError(f"{path}: checkpoint has no {RADIUS_NORM_NAME} tensor")
    radius_norm = arrays.pop(RADIUS_NORM_NAME).astype(np.float64)
    params = init_params(cfg, dtype=dtype)
    set_tensors(params, arrays, dtype=dtype)
    params.radius_norm = radius_norm
    return params


def save_config(path, cfg: ModelConfig):
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path) -> ModelConfig:
    with open(path) as f:
        return ModelConfig.from_dict(json.load(f))
