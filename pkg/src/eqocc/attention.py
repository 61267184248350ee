"""Multi-head roto-translation equivariant attention over point neighborhoods.

One block = attention module (per-head queries, kernel-valued keys/values,
softmax over each destination's neighborhood), head concat, channel-mixing
projection, skip concat with the block input, output projection, norm
nonlinearity.  Self- and cross-attention share the whole code path: the only
difference is which tokens play destination and which play source.

Edges are grouped by destination token into contiguous segments, so every
reduction is a fixed-order ``reduceat`` over a canonical neighbor ordering;
outputs are bit-reproducible for a fixed geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import fibers as fb
from .fibers import EquivLinear, Fibers, FiberType, FiberVec, TFNKernel

__all__ = [
    "EdgeSet",
    "AttentionBlockParams",
    "attention_kernel",
    "build_edge_set",
    "edge_set_from_arrays",
    "attention_block",
    "attention_weights",
    "weights_by_token",
    "self_attention_layer",
    "cross_attention_layer",
]


def attention_kernel(q: FiberVec, k: FiberVec) -> float:
    """Scaled invariant dot product of two same-type fibers."""
    if q.ftype != k.ftype:
        raise ValueError(f"query type {q.ftype} does not match key type {k.ftype}")
    return float(q.data @ k.data) / math.sqrt(q.ftype.dim)


# ---------------------------------------------------------------------------
# edge geometry


@dataclass
class EdgeSet:
    """Fixed gather/scatter layout for one destination-token batch.

    Edges of destination i occupy ``seg_starts[i]:seg_starts[i+1]`` (every
    destination has at least one edge).  ``angular`` caches the parameter-free
    angular blocks per coupling so a stack of blocks reuses one geometry pass.
    """

    seg_starts: np.ndarray  # (n_dst + 1,) int
    dst: np.ndarray  # (E,) destination token per edge
    src: np.ndarray  # (E,) source row in the key/value token set
    radii: np.ndarray  # (E,) |dx| / radius_scale
    angular: dict  # (k, l, J) -> (E, 2k+1, 2l+1)
    scatter_dst: object  # (n_dst, E) CSR, backward of dst gathers
    scatter_src: object  # (n_src, E) CSR, backward of src gathers

    @property
    def n_dst(self) -> int:
        return len(self.seg_starts) - 1


def _scatter_matrix(idx, n_rows, dtype):
    e = len(idx)
    return sp.csr_matrix(
        (np.ones(e, dtype=dtype), (idx, np.arange(e))), shape=(n_rows, e)
    )


def build_edge_set(
    kv_points,
    dst_points,
    neighbor_lists,
    in_ls,
    out_ls,
    radius_scale=1.0,
    dtype=np.float64,
):
    """Assemble the edge batch ``dst i <- kv j`` for j in neighbor_lists[i].

    Displacements are ``kv_points[j] - dst_points[i]``; neighbor lists keep
    their given (canonical) order and must be non-empty.
    """
    counts = np.array([len(ix) for ix in neighbor_lists], dtype=np.int64)
    if np.any(counts == 0):
        raise ValueError("every destination needs a non-empty neighbor list")
    seg_starts = np.concatenate(([0], np.cumsum(counts)))
    src = np.concatenate([np.asarray(ix, dtype=np.int64) for ix in neighbor_lists])
    dst = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    return edge_set_from_arrays(
        kv_points, dst_points, src, dst, seg_starts, in_ls, out_ls,
        radius_scale, dtype,
    )


def edge_set_from_arrays(
    kv_points,
    dst_points,
    src,
    dst,
    seg_starts,
    in_ls,
    out_ls,
    radius_scale=1.0,
    dtype=np.float64,
):
    """Edge batch from prebuilt index arrays (edges grouped by destination)."""
    kv_points = np.asarray(kv_points, dtype=np.float64)
    dst_points = np.asarray(dst_points, dtype=np.float64)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    seg_starts = np.asarray(seg_starts, dtype=np.int64)
    dx = kv_points[src] - dst_points[dst]
    r, C = fb.angular_edge_basis(dx, in_ls, out_ls, dtype)
    radii = (r / radius_scale).astype(dtype)
    return EdgeSet(
        seg_starts=seg_starts,
        dst=dst,
        src=src,
        radii=radii,
        angular=C,
        scatter_dst=_scatter_matrix(dst, len(dst_points), dtype),
        scatter_src=_scatter_matrix(src, len(kv_points), dtype),
    )


def gather_fibers(fibers: Fibers, idx, scatter=None) -> Fibers:
    return Fibers(
        fibers.ftype,
        {l: ad.gather0(b, idx, scatter) for l, b in fibers.blocks.items()},
    )


# ---------------------------------------------------------------------------
# block parameters


def _merge_types(a: FiberType, b: FiberType) -> FiberType:
    ls = sorted(set(a.ls) | set(b.ls))
    return FiberType(tuple((l, a.mult(l) + b.mult(l)) for l in ls))


@dataclass
class AttentionBlockParams:
    """All learnable tensors of one attention block.

    Heads are contiguous channel groups: head h owns rows
    [h*m/H, (h+1)*m/H) of every per-type multiplicity axis, and the key and
    value kernels carry one independent radial-MLP group per head.
    """

    heads: int
    query_in: FiberType
    kv_in: FiberType
    qk_type: FiberType
    value_type: FiberType
    out_type: FiberType
    w_q: EquivLinear  # query_in -> qk_type, rows sliced per head
    key_kernel: TFNKernel  # kv_in -> qk_type, groups = heads
    value_kernel: TFNKernel  # kv_in -> value_type, groups = heads
    w_p: EquivLinear  # value_type -> value_type, mixes merged heads
    w_skip: EquivLinear  # (value_type ++ query_in) -> out_type
    ln_scales: dict  # l -> (out mult,) norm gains

    @staticmethod
    def init(
        rng,
        heads,
        query_in,
        kv_in,
        qk_type,
        value_type,
        out_type,
        radial_hidden=16,
        dtype=np.float64,
    ):
        for t in (qk_type, value_type):
            for l, m in t.entries:
                if m % heads:
                    raise ValueError(
                        f"multiplicity {m} of type {l} not divisible by {heads} heads"
                    )
        w_q = EquivLinear.init(rng, query_in, qk_type, dtype)
        key_kernel = TFNKernel.init(rng, kv_in, qk_type, radial_hidden, heads, dtype)
        value_kernel = TFNKernel.init(
            rng, kv_in, value_type, radial_hidden, heads, dtype
        )
        w_p = EquivLinear.init(rng, value_type, value_type, dtype)
        w_skip = EquivLinear.init(rng, _merge_types(value_type, query_in), out_type, dtype)
        ln_scales = {l: np.ones(m, dtype=dtype) for l, m in out_type.entries}
        return AttentionBlockParams(
            heads,
            query_in,
            kv_in,
            qk_type,
            value_type,
            out_type,
            w_q,
            key_kernel,
            value_kernel,
            w_p,
            w_skip,
            ln_scales,
        )


# ---------------------------------------------------------------------------
# forward


def _kernel_angular_parts(params: AttentionBlockParams, edges: EdgeSet, kv_fibers):
    kv_e = gather_fibers(kv_fibers, edges.src, edges.scatter_src)
    out_ls = sorted(set(params.qk_type.ls) | set(params.value_type.ls))
    return fb.angular_parts(kv_e, edges.angular, out_ls)


def _edge_weights(params: AttentionBlockParams, edges: EdgeSet, q_fibers, parts):
    """Softmax attention weights per edge and head, (E, H)."""
    q = fb.equiv_linear_apply(params.w_q, q_fibers)
    keys = fb.tfn_apply(params.key_kernel, edges.radii, parts)
    h = params.heads
    total = None
    for l in params.qk_type.ls:
        qe = ad.gather0(q.blocks[l], edges.dst, edges.scatter_dst)
        prod = ad.einsum("ecm,ecm->ec", qe, keys[l])
        e, mq = ad.value(prod).shape
        per_head = ad.sum_(ad.reshape(prod, (e, h, mq // h)), axis=2)
        total = per_head if total is None else ad.add(total, per_head)
    logits = ad.mul(total, 1.0 / math.sqrt(params.qk_type.dim / h))
    # constant shift per segment: softmax is exactly invariant to it
    m = np.maximum.reduceat(ad.value(logits), edges.seg_starts[:-1], axis=0)
    ez = ad.exp(ad.sub(logits, m[edges.dst]))
    denom = ad.segment_sum(ez, edges.seg_starts)
    return ad.div(ez, ad.gather0(denom, edges.dst, edges.scatter_dst))


def attention_block(
    params: AttentionBlockParams, edges: EdgeSet, q_fibers: Fibers, kv_fibers: Fibers
) -> Fibers:
    """Evaluate one block; returns one out-type fiber per destination token."""
    parts = _kernel_angular_parts(params, edges, kv_fibers)
    w = _edge_weights(params, edges, q_fibers, parts)
    values = fb.tfn_apply(params.value_kernel, edges.radii, parts)
    h = params.heads
    blocks = {}
    for k in params.value_type.ls:
        v = values[k]
        e, nv, dk = ad.value(v).shape
        wv = ad.einsum("eh,ehcd->ehcd", w, ad.reshape(v, (e, h, nv // h, dk)))
        blocks[k] = ad.segment_sum(ad.reshape(wv, (e, nv, dk)), edges.seg_starts)
    attn = Fibers(params.value_type, blocks)
    proj = fb.equiv_linear_apply(params.w_p, attn)
    skip = fb.skip_concat(proj, q_fibers)
    merged = fb.equiv_linear_apply(params.w_skip, skip)
    return fb.equiv_layer_norm(merged, params.ln_scales)


def attention_weights(
    params: AttentionBlockParams, edges: EdgeSet, q_fibers: Fibers, kv_fibers: Fibers
) -> np.ndarray:
    """The (E, heads) softmax weights, untracked (inspection/contract use)."""
    with ad.no_grad():
        parts = _kernel_angular_parts(params, edges, kv_fibers)
        return np.asarray(_edge_weights(params, edges, q_fibers, parts))


def weights_by_token(edges: EdgeSet, weights):
    """Per destination token, the map source index -> per-head weight row."""
    out = []
    for i in range(edges.n_dst):
        a, b = int(edges.seg_starts[i]), int(edges.seg_starts[i + 1])
        out.append({int(edges.src[e]): weights[e] for e in range(a, b)})
    return out


# ---------------------------------------------------------------------------
# spec-shaped wrappers (one-off evaluation; stacks should share an EdgeSet)


def _params_dtype(params: AttentionBlockParams):
    return ad.value(next(iter(params.w_q.weights.values()))).dtype


def _fresh_edges(params, kv_points, dst_points, neighbor_lists, radius_scale):
    out_ls = sorted(set(params.qk_type.ls) | set(params.value_type.ls))
    return build_edge_set(
        kv_points,
        dst_points,
        neighbor_lists,
        params.kv_in.ls,
        out_ls,
        radius_scale,
        _params_dtype(params),
    )


def self_attention_layer(
    fibers: Fibers, points, neighborhoods, params: AttentionBlockParams, radius_scale=1.0
) -> Fibers:
    """One block where every point attends over its own neighborhood."""
    edges = _fresh_edges(
        params, points, points, [n.indices for n in neighborhoods], radius_scale
    )
    return attention_block(params, edges, fibers, fibers)


def cross_attention_layer(
    pc_fibers: Fibers,
    points,
    query,
    f_q: FiberVec,
    neighborhood,
    params: AttentionBlockParams,
    radius_scale=1.0,
) -> FiberVec:
    """One block for a single external query token attending into the cloud."""
    edges = _fresh_edges(
        params,
        points,
        np.asarray(query, dtype=np.float64)[None],
        [neighborhood.indices],
        radius_scale,
    )
    out = attention_block(params, edges, Fibers.from_vec(f_q), pc_fibers)
    return out.to_vec(0)
