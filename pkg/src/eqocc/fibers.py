"""Typed feature stacks ("fibers") and the equivariant maps between them.

A fiber carries, per irreducible type l, a stack of ``mult`` copies of the
(2l+1)-dimensional real irreducible.  The flat layout orders blocks by type
entry, then multiplicity, then ``m = -l..l``.  Batched code keeps the natural
shape ``(T, mult, 2l+1)`` per type instead.

Equivariant maps come in two flavours:

  * position-independent maps are, by Schur's lemma, zero between distinct
    types and one scalar per (out-channel, in-channel) pair within a type
    (:class:`EquivLinear`);
  * position-dependent kernels expand in the angular basis
    ``W(dx) = sum_J phi_J(|dx|) C_J(dx/|dx|)`` with learned radial profiles
    ``phi_J`` (:class:`TFNKernel`).  At ``|dx| < 1e-9`` only the J = 0 blocks
    survive with their (constant) isotropic angular factor, which makes the
    self-interaction an :class:`EquivLinear` in disguise.

The nonlinearity story is norm-based: ``equiv_layer_norm`` layer-normalises
the per-channel norms across multiplicities, applies a ReLU, and rescales
each channel to the new norm without touching its direction.

Radial profiles see ``|dx| / r_bar`` where ``r_bar`` is a dataset statistic
(mean k-NN distance) supplied by the caller, so the MLP inputs are O(1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .so3 import angular_kernel_basis, clebsch_gordan, real_sph_harm

__all__ = [
    "FiberType",
    "FiberVec",
    "Fibers",
    "EquivLinear",
    "TFNKernel",
    "equiv_linear_apply",
    "equiv_linear_matrix",
    "angular_parts",
    "tfn_apply",
    "tfn_kernel_matrix",
    "equiv_layer_norm",
    "skip_concat",
    "head_split",
    "head_merge",
    "SELF_EDGE_EPS",
]

SELF_EDGE_EPS = 1e-9
NORM_EPS = 1e-6


@dataclass(frozen=True)
class FiberType:
    """Ordered ``(l, mult)`` entries with strictly increasing l."""

    entries: tuple

    def __post_init__(self):
        ent = tuple((int(l), int(m)) for l, m in self.entries)
        if not ent:
            raise ValueError("fiber type needs at least one entry")
        ls = [l for l, _ in ent]
        if ls != sorted(set(ls)):
            raise ValueError(f"types must be strictly increasing, got {ls}")
        if any(m < 1 for _, m in ent) or any(l < 0 for l, _ in ent):
            raise ValueError(f"invalid fiber entries {ent}")
        object.__setattr__(self, "entries", ent)

    @property
    def ls(self):
        return tuple(l for l, _ in self.entries)

    def mult(self, l):
        for ll, m in self.entries:
            if ll == l:
                return m
        return 0

    @property
    def dim(self):
        return sum(m * (2 * l + 1) for l, m in self.entries)

    def flat_range(self, l):
        """[start, stop) of type l's block in the flat layout."""
        off = 0
        for ll, m in self.entries:
            width = m * (2 * ll + 1)
            if ll == l:
                return off, off + width
            off += width
        raise KeyError(f"type {l} not present in {self.entries}")


@dataclass
class FiberVec:
    """A single fiber as one flat vector (contract/test representation)."""

    ftype: FiberType
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.ftype.dim,):
            raise ValueError(
                f"data shape {self.data.shape} does not match fiber dim {self.ftype.dim}"
            )

    def block(self, l):
        a, b = self.ftype.flat_range(l)
        return self.data[a:b].reshape(self.ftype.mult(l), 2 * l + 1)

    @staticmethod
    def from_blocks(ftype, blocks):
        parts = [np.asarray(blocks[l]).reshape(-1) for l in ftype.ls]
        return FiberVec(ftype, np.concatenate(parts))


@dataclass
class Fibers:
    """Batched fibers: per type l an array/Node of shape ``(T, mult, 2l+1)``."""

    ftype: FiberType
    blocks: dict

    @property
    def count(self):
        return ad.value(next(iter(self.blocks.values()))).shape[0]

    def block_value(self, l):
        return ad.value(self.blocks[l])

    @staticmethod
    def from_vec(vec: FiberVec, dtype=np.float64):
        blocks = {
            l: vec.block(l).astype(dtype)[None, :, :] for l in vec.ftype.ls
        }
        return Fibers(vec.ftype, blocks)

    def to_vec(self, row=0):
        return FiberVec.from_blocks(
            self.ftype, {l: self.block_value(l)[row] for l in self.ftype.ls}
        )

    def transform(self, rotation):
        """Apply the fiber representation of a rotation (plain numpy)."""
        from .so3 import wigner_d

        out = {}
        for l in self.ftype.ls:
            d = wigner_d(l, rotation)
            out[l] = np.einsum("ab,tib->tia", d, self.block_value(l))
        return Fibers(self.ftype, out)


# Type-1 components are harmonic-ordered (y, z, x); Cartesian data entering
# or leaving fiber space must go through these embeddings or the l=1
# transform law silently breaks.
_CART_TO_FIBER = (1, 2, 0)
_FIBER_TO_CART = (2, 0, 1)


def vectors_to_type1(vectors):
    """Embed Cartesian 3-vectors (..., 3) as type-1 fiber components."""
    return np.asarray(vectors, dtype=np.float64)[..., _CART_TO_FIBER]


def type1_to_vectors(components):
    """Inverse of :func:`vectors_to_type1`."""
    return np.asarray(components)[..., _FIBER_TO_CART]


def fiber_rep_matrix(ftype: FiberType, rotation) -> np.ndarray:
    """Dense block-diagonal matrix of the fiber representation of a rotation."""
    from scipy.linalg import block_diag

    from .so3 import wigner_d

    blocks = []
    for l, m in ftype.entries:
        d = wigner_d(l, rotation)
        blocks.extend([d] * m)
    return block_diag(*blocks)


# ---------------------------------------------------------------------------
# position-independent maps


@dataclass
class EquivLinear:
    """Type-preserving linear map: one (out_mult, in_mult) matrix per shared l."""

    in_type: FiberType
    out_type: FiberType
    weights: dict  # l -> (out_mult, in_mult) array/Node

    @staticmethod
    def init(rng, in_type, out_type, dtype=np.float64):
        weights = {}
        for l in out_type.ls:
            mi = in_type.mult(l)
            if mi == 0:
                continue
            s = 1.0 / math.sqrt(mi)
            weights[l] = rng.uniform(-s, s, (out_type.mult(l), mi)).astype(dtype)
        return EquivLinear(in_type, out_type, weights)


def equiv_linear_apply(lin: EquivLinear, fibers: Fibers) -> Fibers:
    if fibers.ftype != lin.in_type:
        raise ValueError(f"fiber type {fibers.ftype} does not match map input {lin.in_type}")
    t = fibers.count
    ref = ad.value(next(iter(fibers.blocks.values())))
    out = {}
    for l, m in lin.out_type.entries:
        if l in lin.weights:
            out[l] = ad.einsum("oi,tia->toa", lin.weights[l], fibers.blocks[l])
        else:
            out[l] = np.zeros((t, m, 2 * l + 1), dtype=ref.dtype)
    return Fibers(lin.out_type, out)


def equiv_linear_matrix(lin: EquivLinear) -> np.ndarray:
    """Dense (out_dim, in_dim) matrix of the map, for closure/contract checks."""
    M = np.zeros((lin.out_type.dim, lin.in_type.dim))
    for l in lin.out_type.ls:
        if l not in lin.weights:
            continue
        w = ad.value(lin.weights[l])
        oa, _ = lin.out_type.flat_range(l)
        ia, _ = lin.in_type.flat_range(l)
        d = 2 * l + 1
        for o in range(w.shape[0]):
            for i in range(w.shape[1]):
                sl_o = slice(oa + o * d, oa + (o + 1) * d)
                sl_i = slice(ia + i * d, ia + (i + 1) * d)
                M[sl_o, sl_i] = w[o, i] * np.eye(d)
    return M


# ---------------------------------------------------------------------------
# position-dependent kernels


@dataclass
class RadialStack:
    """Stacked radial MLPs for one (out type k, in type l) coupling pair.

    The block axis enumerates (group, J) pairs, group-major: block
    ``g * len(Js) + j`` is the scalar-input MLP [1 -> h -> h -> out*in] for
    coupling degree ``Js[j]`` of group g.  Groups are fully independent
    parameter sets (used for attention heads); ``out_mult`` is per group.
    """

    Js: tuple  # ascending coupling degrees |k-l|..k+l
    groups: int
    out_mult: int  # per group
    in_mult: int
    w0: object  # (B, h)
    b0: object  # (B, h)
    w1: object  # (B, h, h)
    b1: object  # (B, h)
    w2: object  # (B, h, out_mult * in_mult)
    b2: object  # (B, out_mult * in_mult)


@dataclass
class TFNKernel:
    """Angular-basis kernel ``W(dx) = sum_J phi_J(|dx|) C_J(dx/|dx|)``.

    With ``groups > 1`` the kernel is exactly a stack of ``groups``
    independent kernels laid out contiguously on the output multiplicity
    axis (group g owns out channels [g*om, (g+1)*om) of every out type).
    """

    in_type: FiberType
    out_type: FiberType
    hidden: int
    groups: int
    stacks: dict  # (k, l) -> RadialStack

    @staticmethod
    def init(rng, in_type, out_type, hidden, groups=1, dtype=np.float64):
        stacks = {}
        for k in out_type.ls:
            if out_type.mult(k) % groups:
                raise ValueError(
                    f"out multiplicity {out_type.mult(k)} of type {k} "
                    f"not divisible by {groups} groups"
                )
            for l in in_type.ls:
                Js = tuple(range(abs(k - l), k + l + 1))
                B, h = groups * len(Js), hidden
                om, im = out_type.mult(k) // groups, in_type.mult(l)
                s1 = 1.0 / math.sqrt(h)
                stacks[(k, l)] = RadialStack(
                    Js=Js,
                    groups=groups,
                    out_mult=om,
                    in_mult=im,
                    w0=rng.uniform(-1.0, 1.0, (B, h)).astype(dtype),
                    b0=np.zeros((B, h), dtype=dtype),
                    w1=rng.uniform(-s1, s1, (B, h, h)).astype(dtype),
                    b1=np.zeros((B, h), dtype=dtype),
                    w2=rng.uniform(-s1, s1, (B, h, om * im)).astype(dtype),
                    b2=np.zeros((B, om * im), dtype=dtype),
                )
        return TFNKernel(in_type, out_type, hidden, groups, stacks)

    def radial_block(self, k, l, J, group=0):
        """View of one coupling's MLP parameters (contract access)."""
        st = self.stacks[(k, l)]
        b = group * len(st.Js) + st.Js.index(J)
        return {
            name: ad.narrow(getattr(st, name), 0, b, 1)
            for name in ("w0", "b0", "w1", "b1", "w2", "b2")
        }


def radial_forward(stack: RadialStack, r):
    """Evaluate all stacked profiles at radii ``r``; (E, B, out, in)."""
    h0 = ad.softplus(ad.add(ad.einsum("e,bh->ebh", r, stack.w0), stack.b0))
    h1 = ad.softplus(ad.add(ad.einsum("ebh,bhk->ebk", h0, stack.w1), stack.b1))
    phi = ad.add(ad.einsum("ebh,bhm->ebm", h1, stack.w2), stack.b2)
    e = ad.value(phi).shape[0]
    B = stack.groups * len(stack.Js)
    return ad.reshape(phi, (e, B, stack.out_mult, stack.in_mult))


def angular_edge_basis(dx, in_ls, out_ls, dtype=np.float64):
    """Per-edge angular blocks ``C_J`` with the self-edge rule applied.

    Returns ``(r, C)`` where ``r[e] = |dx_e|`` and ``C[(k, l, J)]`` has shape
    ``(E, 2k+1, 2l+1)``.  On edges with ``r < SELF_EDGE_EPS`` the J >= 1
    blocks are zeroed and J = 0 keeps its constant (= isotropic mean) value,
    which is exactly the learned self-interaction rule.
    """
    dx = np.asarray(dx, dtype=np.float64)
    r = np.linalg.norm(dx, axis=-1)
    self_mask = r < SELF_EDGE_EPS
    safe = np.where(self_mask, 1.0, r)
    dirs = dx / safe[:, None]
    dirs[self_mask] = (0.0, 0.0, 1.0)  # arbitrary; J >= 1 rows are zeroed below
    C = {}
    for k in out_ls:
        for l in in_ls:
            for J in range(abs(k - l), k + l + 1):
                c = angular_kernel_basis(k, l, J, dirs)
                if J >= 1:
                    c[self_mask] = 0.0
                C[(k, l, J)] = c.astype(dtype)
    return r.astype(dtype), C


def angular_parts(fibers: Fibers, C, out_ls):
    """Contract input fibers against the angular blocks once per coupling pair.

    Returns per (out type k, in type l) a Node ``(E, B, in_mult_l, 2k+1)``
    whose B axis enumerates J = |k-l|..k+l, matching RadialStack order.
    """
    out = {}
    for k in out_ls:
        for l in fibers.ftype.ls:
            pieces = []
            for J in range(abs(k - l), k + l + 1):
                t = ad.einsum("eab,eib->eia", C[(k, l, J)], fibers.blocks[l])
                e, i, a2 = ad.value(t).shape
                pieces.append(ad.reshape(t, (e, 1, i, a2)))
            out[(k, l)] = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=1)
    return out


def tfn_apply(kernel: TFNKernel, r, parts) -> dict:
    """Apply the kernel given radii and precomputed angular parts.

    ``parts`` comes from :func:`angular_parts` on the same edges; the result
    maps out type k to ``(E, out_mult_k, 2k+1)`` with group g's channels at
    rows [g*om, (g+1)*om).
    """
    out = {}
    for k in kernel.out_type.ls:
        total = None
        for l in kernel.in_type.ls:
            st = kernel.stacks[(k, l)]
            phi = radial_forward(st, r)
            e = ad.value(phi).shape[0]
            phi = ad.reshape(phi, (e, st.groups, len(st.Js), st.out_mult, st.in_mult))
            term = ad.einsum("egboi,ebia->egoa", phi, parts[(k, l)])
            term = ad.reshape(term, (e, st.groups * st.out_mult, 2 * k + 1))
            total = term if total is None else ad.add(total, term)
        out[k] = total
    return out


def tfn_kernel_matrix(kernel: TFNKernel, dx, radius_scale=1.0) -> np.ndarray:
    """Dense (out_dim, in_dim) kernel matrix at one displacement (contract form)."""
    dx = np.asarray(dx, dtype=np.float64)
    r = float(np.linalg.norm(dx))
    self_edge = r < SELF_EDGE_EPS
    M = np.zeros((kernel.out_type.dim, kernel.in_type.dim))
    with ad.no_grad():
        for (k, l), st in kernel.stacks.items():
            phi = radial_forward(st, np.array([r / radius_scale]))[0]
            ka, _ = kernel.out_type.flat_range(k)
            la, _ = kernel.in_type.flat_range(l)
            dk, dl = 2 * k + 1, 2 * l + 1
            for b in range(st.groups * len(st.Js)):
                g, j = divmod(b, len(st.Js))
                J = st.Js[j]
                if self_edge and J >= 1:
                    continue
                if self_edge:
                    c = clebsch_gordan(k, l, J)[0] * float(real_sph_harm(0, np.array([0.0, 0, 1.0]))[0])
                else:
                    c = angular_kernel_basis(k, l, J, dx / r)
                for o in range(st.out_mult):
                    og = g * st.out_mult + o
                    for i in range(st.in_mult):
                        sl_o = slice(ka + og * dk, ka + (og + 1) * dk)
                        sl_i = slice(la + i * dl, la + (i + 1) * dl)
                        M[sl_o, sl_i] += phi[b, o, i] * c
    return M


# ---------------------------------------------------------------------------
# norm nonlinearity, skips, heads


def equiv_layer_norm(fibers: Fibers, scales) -> Fibers:
    """Norm-based nonlinearity: ReLU(LayerNorm over channel norms), direction kept.

    ``scales[l]`` is the per-channel affine gain of type l.  Channel norms are
    normalised across the multiplicity axis, gained, rectified, and each
    channel is rescaled to its new norm; zero channels stay zero.
    """
    out = {}
    for l in fibers.ftype.ls:
        f = fibers.blocks[l]
        sq = ad.sum_(ad.square(f), axis=2)  # (T, mult)
        n = ad.sqrt(ad.add(sq, NORM_EPS * NORM_EPS))
        mu = ad.mean_(n, axis=1, keepdims=True)
        var = ad.mean_(ad.square(ad.sub(n, mu)), axis=1, keepdims=True)
        z = ad.div(ad.sub(n, mu), ad.sqrt(ad.add(var, NORM_EPS)))
        y = ad.relu(ad.mul(z, scales[l]))
        factor = ad.div(y, ad.add(n, NORM_EPS))
        out[l] = ad.mul(f, ad.reshape(factor, ad.value(factor).shape + (1,)))
    return Fibers(fibers.ftype, out)


def skip_concat(a: Fibers, b: Fibers) -> Fibers:
    """Concatenate multiplicities per type, a's channels first."""
    ls = sorted(set(a.ftype.ls) | set(b.ftype.ls))
    entries, blocks = [], {}
    for l in ls:
        entries.append((l, a.ftype.mult(l) + b.ftype.mult(l)))
        if a.ftype.mult(l) and b.ftype.mult(l):
            blocks[l] = ad.concat([a.blocks[l], b.blocks[l]], axis=1)
        elif a.ftype.mult(l):
            blocks[l] = a.blocks[l]
        else:
            blocks[l] = b.blocks[l]
    return Fibers(FiberType(tuple(entries)), blocks)


def head_split(fibers: Fibers, heads: int):
    """Split every type's multiplicity into ``heads`` contiguous slices."""
    for l, m in fibers.ftype.entries:
        if m % heads:
            raise ValueError(f"multiplicity {m} of type {l} not divisible by {heads} heads")
    out = []
    for h in range(heads):
        blocks = {}
        entries = []
        for l, m in fibers.ftype.entries:
            mh = m // heads
            entries.append((l, mh))
            blocks[l] = ad.narrow(fibers.blocks[l], 1, h * mh, mh)
        out.append(Fibers(FiberType(tuple(entries)), blocks))
    return out


def head_merge(parts) -> Fibers:
    """Inverse of :func:`head_split`: concatenate per-head multiplicities."""
    base = parts[0].ftype
    entries = tuple((l, m * len(parts)) for l, m in base.entries)
    blocks = {
        l: ad.concat([p.blocks[l] for p in parts], axis=1) for l in base.ls
    }
    return Fibers(FiberType(entries), blocks)
