"""Scikit-learn style facade: fit on shape oracles, predict occupancy.

The underlying toolkit is functional (configs in, params out); this wraps it
in the familiar estimator shape so it slots into sklearn tooling
(``get_params``/``set_params``, ``clone``, grid search over the constructor
arguments).  ``X`` for :meth:`fit` is a sequence of shape oracles; ``X`` for
:meth:`predict` is one ``(cloud, queries)`` pair, since inference conditions
on an observed point cloud rather than on fitted training rows.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import data_io, model, recon, training

__all__ = [
    "OccupancyFieldEstimator",
    "validate_cloud",
    "validate_queries",
    "validate_oracle",
]


def validate_cloud(x, name="cloud"):
    """Coerce to finite (N, 3) float64 with N >= 2."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {a.shape}")
    if len(a) < 2:
        raise ValueError(f"{name} needs at least 2 points, got {len(a)}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def validate_queries(q, name="queries"):
    """Coerce to finite (M, 3) float64; a single point becomes one row."""
    a = np.asarray(q, dtype=np.float64)
    if a.ndim == 1 and a.shape == (3,):
        a = a[None]
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (M, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def validate_oracle(obj, name="shape"):
    """Anything with the oracle protocol: surface samples, inside test, bbox."""
    for attr in ("sample_surface", "contains", "bbox"):
        if not callable(getattr(obj, attr, None)):
            raise TypeError(f"{name} lacks required method {attr}()")
    return obj


def _pair(X):
    if not isinstance(X, (tuple, list)) or len(X) != 2:
        raise ValueError("X must be a (cloud, queries) pair")
    return validate_cloud(X[0]), validate_queries(X[1])


class OccupancyFieldEstimator(BaseEstimator):
    """Occupancy field learned from sampled shape surfaces.

    Parameters mirror the model and training configs one-to-one; see
    :class:`eqocc.model.ModelConfig` and :class:`eqocc.training.TrainConfig`.
    """

    def __init__(self, enc_layers=2, dec_layers=2, heads=2, mult=8, k=8,
                 dec_out_scalars=8, radial_hidden=8, occ_threshold=0.2,
                 lr_start=3e-3, lr_end=3e-4, batch=8, iterations=2000,
                 queries_per_item=192, input_points=300, noise_sigma=0.005,
                 grad_chunks=1, seed=0):
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.heads = heads
        self.mult = mult
        self.k = k
        self.dec_out_scalars = dec_out_scalars
        self.radial_hidden = radial_hidden
        self.occ_threshold = occ_threshold
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.batch = batch
        self.iterations = iterations
        self.queries_per_item = queries_per_item
        self.input_points = input_points
        self.noise_sigma = noise_sigma
        self.grad_chunks = grad_chunks
        self.seed = seed

    # ------------------------------------------------------------------
    def _configs(self):
        mcfg = model.ModelConfig(
            enc_layers=self.enc_layers, dec_layers=self.dec_layers,
            heads=self.heads, mult=self.mult, k=self.k,
            dec_out_scalars=self.dec_out_scalars,
            occ_threshold=self.occ_threshold,
            radial_hidden=self.radial_hidden, seed=self.seed,
        )
        tcfg = training.TrainConfig(
            lr_start=self.lr_start, lr_end=self.lr_end, batch=self.batch,
            iterations=self.iterations,
            queries_per_item=self.queries_per_item,
            input_points=self.input_points, noise_sigma=self.noise_sigma,
            seed=self.seed,
        )
        return mcfg, tcfg

    def fit(self, X, y=None):
        """Train on a sequence of shape oracles; ``y`` is unused."""
        oracles = [validate_oracle(o, f"X[{i}]") for i, o in enumerate(X)]
        if not oracles:
            raise ValueError("X must contain at least one shape oracle")
        mcfg, tcfg = self._configs()
        result = training.train(
            oracles, tcfg, mcfg, grad_chunks=self.grad_chunks
        )
        if result.aborted:
            raise RuntimeError("training aborted on a non-finite loss")
        self.model_config_ = mcfg
        self.params_ = result.params
        self.trace_ = result.trace
        self.detached_ = result.detached
        return self

    def decision_function(self, X):
        """Occupancy field values in (0, 1) for one (cloud, queries) pair."""
        check_is_fitted(self, "params_")
        cloud, queries = _pair(X)
        return model.occupancy_many(
            cloud, queries, self.model_config_, self.params_
        )

    def predict(self, X):
        """Boolean occupancy at the decision threshold."""
        return self.decision_function(X) > self.occ_threshold

    def score(self, X, y):
        """Intersection over union of predicted vs true occupancy labels.

        Returned as a fraction in [0, 1] (sklearn convention); the library's
        :func:`eqocc.recon.iou` itself reports percent.
        """
        pred = self.predict(X)
        y = np.asarray(y).astype(bool).reshape(-1)
        if y.shape != pred.shape:
            raise ValueError(
                f"y has {y.shape[0]} labels for {pred.shape[0]} queries"
            )
        return recon.iou(pred, y) / 100.0

    def reconstruct(self, cloud, resolution=48, pad=0.1):
        """Mesh of the decision surface around an observed cloud."""
        check_is_fitted(self, "params_")
        cloud = validate_cloud(cloud)
        lo, hi = data_io.padded_bbox(cloud.min(axis=0), cloud.max(axis=0), pad)
        grid = model.occupancy_grid(
            cloud, lo, hi, resolution, self.model_config_, self.params_
        )
        return recon.marching_cubes(grid, iso=self.occ_threshold)
