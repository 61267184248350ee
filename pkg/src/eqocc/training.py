"""Training engine: loss, Adam with a linear learning-rate ramp, batching.

A batch of items is evaluated as one disjoint-union graph: clouds are
concatenated, neighbor indices offset, and a single encoder/decoder pass
covers every item.  Per-destination reductions never mix items, so the union
is bit-identical to evaluating items one at a time; the fast index assembly
falls back to the exact per-point code path whenever a neighborhood or
closest-point tie makes the vectorized ordering ambiguous.

Everything here is serial numpy with fixed reduction orders, so a fixed seed
gives bit-identical loss traces across runs; no determinism flag is needed.
Gradient checking runs the model in f64, where central differences with step
1e-3 resolve well below the 1e-6 absolute tolerance.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fibers as fb
from . import geometry as geo
from . import model
from .attention import edge_set_from_arrays
from .data_io import padded_bbox

__all__ = [
    "TrainConfig",
    "TrainingItem",
    "ParamStore",
    "TrainResult",
    "BatchGraph",
    "save_train_config",
    "load_train_config",
    "learning_rate",
    "bce_loss",
    "param_store",
    "record_gradients",
    "adam_step",
    "sample_training_item",
    "mean_neighbor_distance",
    "batch_graph",
    "batch_scores",
    "loss_and_gradients",
    "finite_difference_report",
    "train",
]

CLAMP_LO = 1e-7
CLAMP_HI = 1.0 - 1e-7


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol; defaults are the full-scale values."""

    lr_start: float = 2e-4
    lr_end: float = 1e-5
    batch: int = 64
    iterations: int = 5000
    queries_per_item: int = 2048
    input_points: int = 300
    noise_sigma: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(
                f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}"
            )
        for name in ("batch", "iterations", "queries_per_item", "input_points"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    def to_dict(self) -> dict:
        return {
            "lr_start": self.lr_start,
            "lr_end": self.lr_end,
            "batch": self.batch,
            "iterations": self.iterations,
            "queries_per_item": self.queries_per_item,
            "input_points": self.input_points,
            "noise_sigma": self.noise_sigma,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(doc) - known)
        if extra:
            raise ValueError(f"unknown training config keys: {extra}")
        return cls(**doc)


def save_train_config(path, cfg: TrainConfig):
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")


def load_train_config(path) -> TrainConfig:
    with open(path) as f:
        return TrainConfig.from_dict(json.load(f))


def learning_rate(cfg: TrainConfig, t: int) -> float:
    """lr(t) = lr_start + (lr_end - lr_start) * t / total, exact at the end."""
    if t < 1:
        raise ValueError(f"iteration must be at least 1, got {t}")
    if t >= cfg.iterations:
        return cfg.lr_end
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * (t / cfg.iterations)


# ---------------------------------------------------------------------------
# loss


def bce_loss(pred, target):
    """Mean binary cross-entropy; predictions clamped away from {0, 1}.

    Accepts a tracked node or a plain array for ``pred``; the clamp passes no
    gradient, so fully saturated predictions stop contributing.
    """
    y = np.asarray(ad.value(target))
    pv = np.asarray(ad.value(pred))
    if pv.shape != y.shape:
        raise ValueError(f"prediction shape {pv.shape} does not match labels {y.shape}")
    p = ad.clip(pred, CLAMP_LO, CLAMP_HI)
    ll = ad.add(ad.mul(y, ad.log(p)), ad.mul(1.0 - y, ad.log(ad.sub(1.0, p))))
    return ad.neg(ad.mean_(ll))


# ---------------------------------------------------------------------------
# parameter store and optimizer


@dataclass
class ParamStore:
    """Named parameter tensors with matching gradient and moment buffers.

    ``tensors`` aliases the live model arrays, so optimizer updates written
    in place are immediately visible to the next forward pass.
    """

    tensors: dict
    grads: dict
    first_moment: dict
    second_moment: dict
    detached: tuple = ()


def param_store(params: model.ModelParams) -> ParamStore:
    tensors = model.named_tensors(params)
    return ParamStore(
        tensors=tensors,
        grads={n: np.zeros_like(a) for n, a in tensors.items()},
        first_moment={n: np.zeros_like(a) for n, a in tensors.items()},
        second_moment={n: np.zeros_like(a) for n, a in tensors.items()},
    )


def record_gradients(store: ParamStore, grads: dict) -> tuple:
    """Copy gradients into the store; parameters with no path get zeros.

    Returns the names of those detached parameters (also kept on the store as
    a diagnostics list).
    """
    if set(grads) != set(store.grads):
        raise ValueError("gradient names do not match the parameter store")
    detached = []
    for name, buf in store.grads.items():
        g = grads[name]
        if g is None:
            buf[...] = 0
            detached.append(name)
        else:
            np.copyto(buf, np.asarray(g))
    store.detached = tuple(sorted(detached))
    return store.detached


def adam_step(store: ParamStore, grads: dict, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update at iteration t, in place."""
    if t < 1:
        raise ValueError(f"iteration must be at least 1, got {t}")
    lr = learning_rate(cfg, t)
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, w in store.tensors.items():
        g = np.asarray(grads[name], dtype=w.dtype)
        m = store.first_moment[name]
        v = store.second_moment[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        np.subtract(w, step.astype(w.dtype), out=w)
    return store


# ---------------------------------------------------------------------------
# data sampling


@dataclass
class TrainingItem:
    """One supervised item: a noisy input cloud plus labeled query points."""

    points: np.ndarray  # (n, 3)
    queries: np.ndarray  # (m, 3)
    labels: np.ndarray  # (m,) in {0, 1}

    def __post_init__(self):
        self.points = geo.as_points(self.points)
        self.queries = geo.as_points(self.queries, "queries")
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.shape != (self.queries.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.queries.shape[0]} queries"
            )


def sample_training_item(oracle, cfg: TrainConfig, rng) -> TrainingItem:
    """Surface cloud with per-coordinate gaussian noise + labeled box queries.

    Consumption order is fixed (surface, noise, queries) so one rng stream
    reproduces items exactly.
    """
    clean = oracle.sample_surface(rng, cfg.input_points)
    points = clean + rng.normal(0.0, cfg.noise_sigma, clean.shape)
    lo, hi = padded_bbox(*oracle.bbox(), pad=0.1)
    queries = rng.uniform(lo, hi, (cfg.queries_per_item, 3))
    labels = oracle.contains(queries).astype(np.float64)
    return TrainingItem(points, queries, labels)


def mean_neighbor_distance(clouds, k) -> float:
    """Mean distance to the k-NN members over all points of all clouds.

    Each point's distance-zero self entry is excluded, so the value is the
    typical spacing between a point and its actual neighbors.
    """
    total = 0.0
    count = 0
    for pts in clouds:
        pts = geo.as_points(pts)
        k_eff = min(k, pts.shape[0])
        for i, nb in enumerate(geo.all_neighborhoods(pts, k_eff)):
            d = np.linalg.norm(pts[nb.indices] - pts[i], axis=1)
            others = d[nb.indices != i]
            total += float(others.sum())
            count += others.size
    if count == 0:
        raise ValueError("no neighbor pairs; clouds too small for a mean distance")
    return total / count


# ---------------------------------------------------------------------------
# union-batch graph assembly


@dataclass
class BatchGraph:
    """One disjoint-union forward graph covering a whole batch of items."""

    points: np.ndarray  # (N_total, 3) concatenated clouds
    enc_edges: object  # union self-attention EdgeSet
    in_fibers: np.ndarray  # (N_total, 1, 3)
    starts: np.ndarray  # (Q_total + 1,) candidate starts per query
    dec_edges: object  # union cross-attention EdgeSet
    q_feat: np.ndarray  # (C_total, 1, 3)
    labels: np.ndarray  # (Q_total,)


@dataclass
class _Regular:
    """Vectorized item: exactly k neighbors each, one candidate per query."""

    pts: np.ndarray
    qs: np.ndarray
    idx: np.ndarray  # (n, k) neighborhood table
    feats: np.ndarray  # (n, 3) centroid offsets
    cand: np.ndarray  # (q,) candidate point per query
    qfeat: np.ndarray  # (q, 3)


@dataclass
class _Slow:
    """Fallback item evaluated with the exact tie-aware machinery."""

    pts: np.ndarray
    qs: np.ndarray
    nbr_lists: list
    feats: np.ndarray
    per_query: list  # list of QueryCandidate lists


def _bulk_knn(pts, k):
    """(index table, centroids) when every neighborhood is unambiguous.

    Returns None whenever tie-inclusion would admit more than k members or
    two members sit at exactly equal distance; those cases need the exact
    canonical ordering.
    """
    n = pts.shape[0]
    if n < 2 or k >= n:
        return None
    dist = np.sqrt(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1))
    order = np.argsort(dist, axis=1)
    dsort = np.take_along_axis(dist, order, axis=1)
    dk = dsort[:, k - 1]
    band = dk + geo.TIE_RTOL * dk
    if np.any((dist <= band[:, None]).sum(axis=1) != k):
        return None
    if np.any(np.diff(dsort[:, :k], axis=1) == 0.0):
        return None
    idx = order[:, :k]
    return idx, pts[idx].mean(axis=1)


def _item_parts(item: TrainingItem, mcfg: model.ModelConfig):
    pts = item.points
    qs = item.queries
    k_eff = min(mcfg.k, pts.shape[0])
    bulk = _bulk_knn(pts, k_eff)
    if bulk is not None:
        idx, cent = bulk
        qdist = np.linalg.norm(qs[:, None, :] - pts[None, :, :], axis=-1)
        dmin = qdist.min(axis=1)
        band = dmin + geo.TIE_RTOL * dmin
        if np.all((qdist <= band[:, None]).sum(axis=1) == 1):
            cand = np.argmin(qdist, axis=1)
            return _Regular(pts, qs, idx, pts - cent, cand, qs - cent[cand])
    nbrs = geo.all_neighborhoods(pts, k_eff)
    return _Slow(
        pts,
        qs,
        [nb.indices for nb in nbrs],
        geo.input_features(pts, nbrs),
        geo.query_candidates_many(pts, qs, k_eff),
    )


def batch_graph(items, mcfg: model.ModelConfig, radius_scale=1.0, dtype=np.float32):
    """Assemble the union graph for a list of items, labels concatenated."""
    if not items:
        raise ValueError("need at least one item")
    parts = [_item_parts(it, mcfg) for it in items]
    sizes = [p.pts.shape[0] for p in parts]
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    union = np.vstack([p.pts for p in parts])

    enc_src, enc_counts, feat_rows = [], [], []
    dec_src, dec_counts = [], []
    cand_counts, qpos_rows, qfeat_rows = [], [], []
    for p, off in zip(parts, offsets[:-1]):
        feat_rows.append(p.feats)
        if isinstance(p, _Regular):
            n, k = p.idx.shape
            enc_src.append((p.idx + off).ravel())
            enc_counts.append(np.full(n, k, dtype=np.int64))
            q = p.qs.shape[0]
            dec_src.append((p.idx[p.cand] + off).ravel())
            dec_counts.append(np.full(q, k, dtype=np.int64))
            cand_counts.append(np.ones(q, dtype=np.int64))
            qpos_rows.append(p.qs)
            qfeat_rows.append(p.qfeat)
        else:
            enc_src.append(
                np.concatenate([np.asarray(l, dtype=np.int64) for l in p.nbr_lists])
                + off
            )
            enc_counts.append(np.array([len(l) for l in p.nbr_lists], dtype=np.int64))
            row_counts = []
            per_query = []
            for q_point, cands in zip(p.qs, p.per_query):
                per_query.append(len(cands))
                for c in cands:
                    ind = np.asarray(c.neighborhood.indices, dtype=np.int64)
                    dec_src.append(ind + off)
                    row_counts.append(ind.size)
                    qpos_rows.append(q_point[None, :])
                    qfeat_rows.append(c.feature[None, :])
            dec_counts.append(np.asarray(row_counts, dtype=np.int64))
            cand_counts.append(np.asarray(per_query, dtype=np.int64))

    enc_counts = np.concatenate(enc_counts)
    enc_starts = np.concatenate(([0], np.cumsum(enc_counts)))
    enc_dst = np.repeat(np.arange(enc_counts.size, dtype=np.int64), enc_counts)
    enc_edges = edge_set_from_arrays(
        union, union, np.concatenate(enc_src), enc_dst, enc_starts,
        mcfg.types, mcfg.types, radius_scale, dtype,
    )
    in_fibers = fb.vectors_to_type1(np.vstack(feat_rows))[:, None, :].astype(dtype)

    dec_counts = np.concatenate(dec_counts)
    dec_starts = np.concatenate(([0], np.cumsum(dec_counts)))
    dec_dst = np.repeat(np.arange(dec_counts.size, dtype=np.int64), dec_counts)
    dst_pos = np.vstack(qpos_rows)
    dec_edges = edge_set_from_arrays(
        union, dst_pos, np.concatenate(dec_src), dec_dst, dec_starts,
        mcfg.feature_type.ls, mcfg.types, radius_scale, dtype,
    )
    q_feat = fb.vectors_to_type1(np.vstack(qfeat_rows))[:, None, :].astype(dtype)

    starts = np.concatenate(([0], np.cumsum(np.concatenate(cand_counts))))
    labels = np.concatenate([it.labels for it in items]).astype(dtype)
    return BatchGraph(
        union, enc_edges, in_fibers, starts.astype(np.int64), dec_edges, q_feat,
        labels,
    )


def batch_scores(graph: BatchGraph, mcfg: model.ModelConfig, params):
    """Occupancy scores for every query of the batch, in item order."""
    cg = model.CloudGeometry(graph.points, graph.enc_edges, graph.in_fibers)
    f_p = model.run_encoder(mcfg, params, cg)
    qb = model.QueryBatch(graph.starts, graph.dec_edges, graph.q_feat)
    return model.run_decoder(mcfg, params, qb, f_p)


# ---------------------------------------------------------------------------
# gradients


def _unwrap(params: model.ModelParams):
    for s in model.tensor_slots(params):
        v = s.get()
        if isinstance(v, ad.Node):
            s.set(np.asarray(v.value))


def loss_and_gradients(items, mcfg: model.ModelConfig, params, grad_chunks=1):
    """Mean BCE over every query plus gradients for every named tensor.

    Returns ``(loss, grads, detached)`` where ``grads[name]`` is None for
    parameters with no path to the loss.  ``grad_chunks`` splits the batch
    into serially accumulated sub-graphs (identical result, lower peak
    memory).
    """
    if not items:
        raise ValueError("need at least one item")
    dtype = model.params_dtype(params)
    rs = model._radius_scale(params)
    leaves = model.leafify_params(params)
    try:
        total = sum(it.queries.shape[0] for it in items)
        groups = np.array_split(
            np.arange(len(items)), min(max(1, grad_chunks), len(items))
        )
        loss = 0.0
        for g in groups:
            group = [items[i] for i in g]
            graph = batch_graph(group, mcfg, rs, dtype)
            node = bce_loss(batch_scores(graph, mcfg, params), graph.labels)
            w = graph.labels.shape[0] / total
            ad.backward(node, seed=np.asarray(w, dtype=np.asarray(ad.value(node)).dtype))
            loss += w * float(ad.value(node))
        grads = {name: lf.grad for name, lf in leaves.items()}
    finally:
        _unwrap(params)
    detached = tuple(sorted(n for n, g in grads.items() if g is None))
    return loss, grads, detached


def finite_difference_report(
    mcfg: model.ModelConfig,
    items,
    step=1e-3,
    rtol=1e-4,
    atol=1e-6,
    elements_per_tensor=None,
    seed=0,
    params=None,
):
    """Central-difference check of every named tensor on an f64 model.

    ``elements_per_tensor`` limits the sweep to a deterministic random subset
    per tensor (None checks every element).  An element passes when the
    analytic/numeric difference is within ``atol`` or relatively within
    ``rtol``; detached tensors must show a zero numeric derivative.

    The norm nonlinearity is piecewise linear, so a perturbation interval
    straddling one of its kinks biases the central difference by an amount
    that does not shrink with the step.  A failing element is therefore
    retried at halved steps (up to ten times): a correct gradient matches as
    soon as the kink leaves the interval, while a wrong one keeps failing.
    """
    if params is None:
        params = model.init_params(mcfg, dtype=np.float64)
    elif model.params_dtype(params) != np.float64:
        model.cast_params(params, np.float64)
    graph = batch_graph(items, mcfg, model._radius_scale(params), np.float64)

    leaves = model.leafify_params(params)
    try:
        node = bce_loss(batch_scores(graph, mcfg, params), graph.labels)
        ad.backward(node)
        grads = {name: lf.grad for name, lf in leaves.items()}
    finally:
        _unwrap(params)

    def loss_value():
        return float(bce_loss(batch_scores(graph, mcfg, params), graph.labels))

    rng = np.random.default_rng(seed)
    per_tensor = {}
    failures = []
    checked = 0
    max_abs = 0.0
    max_rel = 0.0
    for name, arr in model.named_tensors(params).items():
        flat = arr.reshape(-1)
        g = grads[name]
        gflat = None if g is None else np.asarray(g).reshape(-1)
        n = flat.size
        if elements_per_tensor is None or n <= elements_per_tensor:
            sel = np.arange(n)
        else:
            sel = np.sort(rng.choice(n, size=elements_per_tensor, replace=False))
        t_abs = 0.0
        t_rel = 0.0
        for j in sel:
            old = flat[j]

            def central(h):
                flat[j] = old + h
                lp = loss_value()
                flat[j] = old - h
                lm = loss_value()
                flat[j] = old
                return (lp - lm) / (2.0 * h)

            an = 0.0 if gflat is None else float(gflat[j])
            h = step
            for _ in range(11):
                fd = central(h)
                diff = abs(an - fd)
                rel = diff / max(abs(an), abs(fd), 1e-30)
                if diff <= atol or rel <= rtol:
                    break
                h *= 0.5
            else:
                failures.append((name, int(j), an, fd))
            t_abs = max(t_abs, diff)
            t_rel = max(t_rel, rel if diff > atol else 0.0)
            checked += 1
        per_tensor[name] = {
            "checked": int(len(sel)),
            "max_abs_err": t_abs,
            "max_rel_err": t_rel,
            "detached": g is None,
        }
        max_abs = max(max_abs, t_abs)
        max_rel = max(max_rel, t_rel)
    return {
        "ok": not failures,
        "checked": checked,
        "max_abs_err": max_abs,
        "max_rel_err": max_rel,
        "detached": sorted(n for n, g in grads.items() if g is None),
        "failures": failures[:20],
        "per_tensor": per_tensor,
    }


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    params: model.ModelParams
    trace: np.ndarray  # (n, 3) columns: iteration, loss, learning rate
    aborted: bool
    detached: tuple
    radius_norm: float


RADIUS_PROBE_ITEMS = 8


def train(
    dataset,
    cfg: TrainConfig,
    mcfg: model.ModelConfig,
    out_dir=None,
    checkpoint_every=500,
    grad_chunks=1,
    params=None,
    progress=None,
) -> TrainResult:
    """Run the optimization loop over randomly drawn dataset items.

    Writes ``loss.csv`` and ``checkpoint.bin`` under ``out_dir`` (checkpoint
    refreshed every ``checkpoint_every`` iterations and at the end).  A
    non-finite loss aborts immediately: the trace keeps only completed
    iterations and the checkpoint on disk stays at the last good save.
    ``dataset`` entries need ``sample_surface``, ``bbox``, and ``contains``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = model.init_params(mcfg, dtype=np.float32)

    # radius normalization: typical neighbor spacing of sampled training input
    probes = [
        sample_training_item(dataset[i % len(dataset)], cfg, rng)
        for i in range(RADIUS_PROBE_ITEMS)
    ]
    rbar = mean_neighbor_distance([it.points for it in probes], mcfg.k)
    params.radius_norm[...] = rbar

    store = param_store(params)
    csv_file = None
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(str(out_dir), "checkpoint.bin")
        model.save_checkpoint(ckpt_path, params)
        csv_file = open(os.path.join(str(out_dir), "loss.csv"), "w")
        csv_file.write("iteration,loss,lr\n")
        csv_file.flush()

    trace = []
    aborted = False
    detached = ()
    try:
        for t in range(1, cfg.iterations + 1):
            picks = rng.integers(0, len(dataset), size=cfg.batch)
            items = [sample_training_item(dataset[int(i)], cfg, rng) for i in picks]
            loss, grads, detached = loss_and_gradients(items, mcfg, params, grad_chunks)
            if not np.isfinite(loss):
                aborted = True
                break
            record_gradients(store, grads)
            adam_step(store, store.grads, t, cfg)
            lr = learning_rate(cfg, t)
            trace.append((t, loss, lr))
            if csv_file is not None:
                csv_file.write(f"{t},{loss!r},{lr!r}\n")
                csv_file.flush()
            if ckpt_path is not None and t % checkpoint_every == 0:
                model.save_checkpoint(ckpt_path, params)
            if progress is not None:
                progress(t, loss, lr)
        if ckpt_path is not None and not aborted:
            model.save_checkpoint(ckpt_path, params)
    finally:
        if csv_file is not None:
            csv_file.close()
    return TrainResult(
        params=params,
        trace=np.asarray(trace, dtype=np.float64).reshape(-1, 3),
        aborted=aborted,
        detached=detached,
        radius_norm=float(rbar),
    )
