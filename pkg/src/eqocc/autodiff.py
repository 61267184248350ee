"""Reverse-mode gradient tape over numpy arrays.

Ops take ``Node`` or plain ndarray operands.  When no operand is tracked (or
grad recording is disabled) they compute with numpy and return a bare
ndarray, so the same forward code serves inference and training.  Backward
walks the tape in reverse topological order; leaf gradients accumulate on
``Node.grad``.  All reductions are fixed-order (reduceat over contiguous
segments, per-row sparse scatters), which keeps results bit-identical for a
fixed segment layout.

dtype follows the operands: float32 graphs stay float32, and a float64
"shadow" pass is just the same code on float64 leaves.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Node",
    "leaf",
    "value",
    "no_grad",
    "backward",
    "add", "sub", "mul", "div", "neg",
    "matmul", "einsum",
    "exp", "log", "sqrt", "square",
    "sigmoid", "softplus", "relu",
    "sum_", "mean_", "max_detached",
    "clip", "concat", "narrow", "reshape",
    "gather0", "segment_sum", "maximum_fold",
    "numeric_grad",
]

_grad_enabled = True


class no_grad:
    """Context manager: ops inside record nothing and return ndarrays."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class Node:
    __slots__ = ("value", "parents", "vjps", "grad")

    def __init__(self, value, parents=(), vjps=()):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype


def leaf(array):
    """Tracked leaf (parameter or input) wrapping ``array``."""
    return Node(np.asarray(array))


def value(x):
    return x.value if isinstance(x, Node) else x


def _tracked(*xs):
    return _grad_enabled and any(isinstance(x, Node) for x in xs)


def _make(val, *pairs):
    # pairs: (operand, vjp); only tracked operands enter the tape.
    parents, vjps = [], []
    for op, vjp in pairs:
        if isinstance(op, Node):
            parents.append(op)
            vjps.append(vjp)
    return Node(val, tuple(parents), tuple(vjps))


def backward(root, seed=None):
    """Accumulate gradients of ``root`` (scalar unless ``seed`` given) on leaves."""
    if not isinstance(root, Node):
        raise TypeError("backward needs a tracked Node")
    topo, state = [], [(root, False)]
    seen = set()
    while state:
        node, expanded = state.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        state.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                state.append((p, False))
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            pg = vjp(g)
            parent.grad = pg if parent.grad is None else parent.grad + pg
        if node.parents:
            node.grad = None  # free interior grads; leaves keep theirs


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    va, vb = value(a), value(b)
    out = va + vb
    if not _tracked(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(g, np.shape(va))),
                 (b, lambda g: _unbroadcast(g, np.shape(vb))))


def sub(a, b):
    va, vb = value(a), value(b)
    out = va - vb
    if not _tracked(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(g, np.shape(va))),
                 (b, lambda g: _unbroadcast(-g, np.shape(vb))))


def neg(a):
    va = value(a)
    if not _tracked(a):
        return -va
    return _make(-va, (a, lambda g: -g))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    if not _tracked(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(g * vb, np.shape(va))),
                 (b, lambda g: _unbroadcast(g * va, np.shape(vb))))


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    if not _tracked(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(g / vb, np.shape(va))),
                 (b, lambda g: _unbroadcast(-g * va / (vb * vb), np.shape(vb))))


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    va, vb = value(a), value(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = va @ vb
    if not _tracked(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(g @ _swap(vb), va.shape)),
                 (b, lambda g: _unbroadcast(_swap(va) @ g, vb.shape)))


def _contract2(spec, va, vb):
    """Two-operand einsum evaluated through batched GEMM where possible.

    Output slices must not depend on how many rows share the call, so a
    contraction only takes the GEMM path when the operands share a batch
    index; there each slice's kernel shape is fixed by the non-batch dims
    (BLAS picks different vector kernels once a free side drops to one, so a
    flat GEMM whose row count varies with tokens would drift by ulps).
    Everything else, plus diagonals and broadcasting, falls back to plain
    einsum, whose per-element loops are row-count independent.
    """
    try:
        ins, out_s = spec.replace(" ", "").split("->")
        sa, sb = ins.split(",")
    except ValueError:
        return np.einsum(spec, va, vb)
    if (
        len(set(sa)) != len(sa)
        or len(set(sb)) != len(sb)
        or len(set(out_s)) != len(out_s)
        or va.ndim != len(sa)
        or vb.ndim != len(sb)
    ):
        return np.einsum(spec, va, vb)
    dims = {}
    for s, v in ((sa, va), (sb, vb)):
        for ch, n in zip(s, v.shape):
            if dims.setdefault(ch, n) != n:
                return np.einsum(spec, va, vb)
    in_a, in_b = set(sa), set(sb)
    if not set(out_s) <= in_a | in_b:
        return np.einsum(spec, va, vb)
    batch = [c for c in out_s if c in in_a and c in in_b]
    ka = [c for c in out_s if c in in_a and c not in in_b]
    kb = [c for c in out_s if c in in_b and c not in in_a]
    con = [c for c in sa if c in in_b and c not in out_s]
    if set(batch + ka + con) != in_a or set(batch + kb + con) != in_b:
        return np.einsum(spec, va, vb)  # an index summed within one operand
    nb = math.prod(dims[c] for c in batch)
    na = math.prod(dims[c] for c in ka)
    nk = math.prod(dims[c] for c in kb)
    nc = math.prod(dims[c] for c in con)
    va2 = va.transpose([sa.index(c) for c in batch + ka + con]).reshape(nb, na, nc)
    vb2 = vb.transpose([sb.index(c) for c in batch + con + kb]).reshape(nb, nc, nk)
    # dispatch on which index classes exist, never on their sizes: a size-
    # triggered path switch would give different rounding for the same slice
    # depending on how many rows ride along in the call
    if not con:
        out2 = va2 * vb2
    elif not ka and not kb:
        out2 = (va2.reshape(nb, nc) * vb2.reshape(nb, nc)).sum(axis=1)
        out2 = out2.reshape(nb, 1, 1)
    elif batch:
        out2 = np.matmul(va2, vb2)
    else:
        return np.einsum(spec, va, vb)
    out2 = out2.reshape([dims[c] for c in batch + ka + kb])
    return out2.transpose([(batch + ka + kb).index(c) for c in out_s])


def einsum(spec, a, b):
    """Two-operand einsum; every input index must appear in the output or the
    other operand (which is what makes the swap-rule backward exact)."""
    ins, out_spec = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    va, vb = value(a), value(b)
    out = _contract2(spec, va, vb)
    if not _tracked(a, b):
        return out
    if not (set(sa) <= set(out_spec) | set(sb) and set(sb) <= set(out_spec) | set(sa)):
        raise ValueError(f"einsum spec {spec!r} has an index summed within one operand")
    return _make(
        out,
        (a, lambda g: _contract2(f"{out_spec},{sb}->{sa}", g, vb)),
        (b, lambda g: _contract2(f"{out_spec},{sa}->{sb}", g, va)),
    )


def exp(a):
    out = np.exp(value(a))
    if not _tracked(a):
        return out
    return _make(out, (a, lambda g: g * out))


def log(a):
    va = value(a)
    out = np.log(va)
    if not _tracked(a):
        return out
    return _make(out, (a, lambda g: g / va))


def sqrt(a):
    out = np.sqrt(value(a))
    if not _tracked(a):
        return out
    return _make(out, (a, lambda g: g / (2.0 * out)))


def square(a):
    va = value(a)
    out = va * va
    if not _tracked(a):
        return out
    return _make(out, (a, lambda g: 2.0 * g * va))


def sigmoid(a):
    va = value(a)
    out = 0.5 * (np.tanh(0.5 * va) + 1.0)
    if not _tracked(a):
        return out
    return _make(out, (a, lambda g: g * out * (1.0 - out)))


def softplus(a):
    va = value(a)
    # stable log(1 + e^x) split by sign; composite ufuncs vectorize well
    out = np.maximum(va, 0.0) + np.log1p(np.exp(-np.abs(va)))
    if not _tracked(a):
        return out
    return _make(out, (a, lambda g: g * (0.5 * (np.tanh(0.5 * va) + 1.0))))


def relu(a):
    va = value(a)
    out = np.maximum(va, 0.0)
    if not _tracked(a):
        return out
    return _make(out, (a, lambda g: g * (va > 0.0)))


def sum_(a, axis=None, keepdims=False):
    va = value(a)
    out = va.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, va.shape).copy() if np.shape(g) != va.shape else g

    return _make(out, (a, vjp))


def mean_(a, axis=None, keepdims=False):
    va = value(a)
    out = va.mean(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return out
    scale = va.size / out.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, va.shape) / scale

    return _make(out, (a, vjp))


def max_detached(a, axis=None, keepdims=False):
    """Max of the value, never tracked (softmax-shift use only)."""
    return value(a).max(axis=axis, keepdims=keepdims)


def clip(a, lo, hi):
    va = value(a)
    out = np.clip(va, lo, hi)
    if not _tracked(a):
        return out
    mask = (va >= lo) & (va <= hi)
    return _make(out, (a, lambda g: g * mask))


def concat(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _tracked(*xs):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp_at(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, *[(x, vjp_at(i)) for i, x in enumerate(xs)])


def narrow(a, axis, start, length):
    va = value(a)
    sl = [slice(None)] * va.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = va[sl]
    if not _tracked(a):
        return out

    def vjp(g):
        full = np.zeros_like(va)
        full[sl] = g
        return full

    return _make(out, (a, vjp))


def reshape(a, shape):
    va = value(a)
    out = va.reshape(shape)
    if not _tracked(a):
        return out
    return _make(out, (a, lambda g: g.reshape(va.shape)))


def gather0(a, idx, scatter=None):
    """Row gather ``out[e] = a[idx[e]]`` along axis 0.

    ``scatter`` may be a prebuilt ``(n_rows, len(idx))`` scipy CSR matrix used
    for the backward scatter-add (fast path for large edge sets); without it
    the backward falls back to ``np.add.at``.
    """
    va = value(a)
    out = va[idx]
    if not _tracked(a):
        return out

    def vjp(g):
        if scatter is not None:
            flat = np.ascontiguousarray(g).reshape(g.shape[0], -1)
            acc = scatter @ flat
            return np.asarray(acc, dtype=va.dtype).reshape(va.shape)
        acc = np.zeros_like(va)
        np.add.at(acc, idx, g)
        return acc

    return _make(out, (a, vjp))


def segment_sum(a, starts):
    """Sum contiguous segments along axis 0.

    ``starts`` has length ``n_segments + 1`` with ``starts[-1] == len(a)``;
    segments must be non-empty (strictly increasing starts).
    """
    va = value(a)
    starts = np.asarray(starts)
    if starts[-1] != va.shape[0] or np.any(np.diff(starts) <= 0):
        raise ValueError("segments must be non-empty and cover the array")
    out = np.add.reduceat(va, starts[:-1], axis=0)
    if not _tracked(a):
        return out
    counts = np.diff(starts)
    return _make(out, (a, lambda g: np.repeat(g, counts, axis=0)))


def maximum_fold(a, b):
    """Elementwise max; on exact ties the gradient routes to ``a`` (the
    earlier branch), matching the lowest-branch-index subgradient rule."""
    va, vb = value(a), value(b)
    out = np.maximum(va, vb)
    if not _tracked(a, b):
        return out
    take_a = va >= vb
    return _make(out, (a, lambda g: _unbroadcast(g * take_a, np.shape(va))),
                 (b, lambda g: _unbroadcast(g * ~take_a, np.shape(vb))))


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g
