"""Confidence in the soft sensor from the distance to its training inputs.

The confidence of a query is derived from the mean squared Euclidean distance
to its ``K`` nearest standardized training inputs and falls linearly from 1
(query on top of training data) to 0 at ``d_max``.  A histogram-binning
confidence is included as a baseline; it jumps at bin borders where the
nearest-neighbour version varies smoothly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DomainError
from .narx import Standardizer

DEFAULT_K = 25
DEFAULT_QUANTILE = 0.95


@dataclass
class ConfidenceModel:
    points: np.ndarray  # standardized training inputs, (N_tr, m)
    standardizer: Standardizer
    K: int = DEFAULT_K
    d_max: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2:
            raise ConfigurationError("training inputs must be a 2-D array")
        if not 1 <= self.K <= len(self.points):
            raise ConfigurationError(f"need 1 <= K <= N_tr, got K={self.K}, N_tr={len(self.points)}")
        if not self.d_max > 0:
            raise ConfigurationError("d_max must be > 0")
        self.tree = cKDTree(self.points)

    def neighbors(self, query_std, k=None):
        """Squared distances and indices of the ``k`` nearest training points."""
        k = self.K if k is None else k
        q = np.atleast_2d(query_std)
        dist, idx = self.tree.query(q, k=k)
        dist = dist.reshape(len(q), k)
        return dist**2, idx.reshape(len(q), k)

    def to_dict(self):
        return {
            "K": self.K,
            "d_max": self.d_max,
            "points": self.points.tolist(),
            "standardizer": self.standardizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d, standardizer: Standardizer | None = None):
        std = standardizer or Standardizer.from_dict(d["standardizer"])
        return cls(np.asarray(d["points"], dtype=float), std, int(d["K"]), float(d["d_max"]))


def leave_one_out_distances(points, K):
    """Mean squared distance of every point to its K nearest *other* points."""
    points = np.asarray(points, dtype=float)
    if len(points) < K + 1:
        raise ConfigurationError("need more than K points for leave-one-out distances")
    dist, idx = cKDTree(points).query(points, k=K + 1)
    self_hit = idx == np.arange(len(points))[:, None]
    # drop the query point itself; with duplicates it may not sit in column 0
    drop = np.where(self_hit.any(axis=1), np.argmax(self_hit, axis=1), K)
    keep = np.ones_like(dist, dtype=bool)
    keep[np.arange(len(points)), drop] = False
    return (dist[keep].reshape(len(points), K) ** 2).mean(axis=1)


def leave_group_out_distances(points, groups, K):
    """Mean squared distance of every point to its K nearest points of *other* groups.

    With time series, a sample's nearest neighbours are usually its own
    temporal neighbours; holding out the whole sequence measures how far a
    new sequence lies from the rest of the data instead.
    """
    points = np.asarray(points, dtype=float)
    groups = np.asarray(groups)
    if groups.shape != (len(points),):
        raise ConfigurationError("need one group label per training input")
    out = np.empty(len(points))
    for g in np.unique(groups):
        mine = groups == g
        if np.count_nonzero(~mine) < K:
            raise ConfigurationError("fewer than K points outside a group")
        dist, _ = cKDTree(points[~mine]).query(points[mine], k=K)
        out[mine] = (dist.reshape(-1, K) ** 2).mean(axis=1)
    return out


def build(training_inputs, standardizer: Standardizer, K: int = DEFAULT_K, d_max: float | None = None,
          quantile: float = DEFAULT_QUANTILE, groups=None) -> ConfidenceModel:
    """Store standardized training inputs and fix the distance threshold.

    Without an explicit ``d_max`` the threshold is the ``quantile`` of the
    leave-one-out mean K-distance over the training set; with ``groups``
    (e.g. one label per maneuver) whole groups are held out instead.
    """
    raw = np.asarray(training_inputs, dtype=float)
    if raw.ndim != 2 or len(raw) < K:
        raise ConfigurationError(f"need at least K={K} training inputs")
    points = standardizer.standardize(raw)
    if d_max is None:
        held_out = (leave_one_out_distances(points, K) if groups is None
                    else leave_group_out_distances(points, groups, K))
        d_max = float(np.quantile(held_out, quantile))
        if d_max <= 0:
            raise ConfigurationError("training inputs are degenerate: leave-one-out distances are all zero")
    return ConfidenceModel(points, standardizer, K, d_max)


def mean_knn_distance(model: ConfidenceModel, query):
    """Mean squared distance from the raw (SI) ``query`` to its K nearest training inputs."""
    q = np.asarray(query, dtype=float)
    d2, _ = model.neighbors(model.standardizer.standardize(q))
    out = d2.mean(axis=1)
    return out if q.ndim > 1 else float(out[0])


def confidence(model_or_dmax, d_k):
    """Linear confidence ``(d_max - d_k) / d_max`` for ``d_k <= d_max``, else 0."""
    d_max = model_or_dmax.d_max if isinstance(model_or_dmax, ConfidenceModel) else float(model_or_dmax)
    d_k = np.asarray(d_k, dtype=float)
    if np.any(d_k < 0):
        raise DomainError("distance must be >= 0")
    tau = np.where(d_k <= d_max, (d_max - d_k) / d_max, 0.0)
    return tau if tau.ndim else float(tau)


def evaluate(model: ConfidenceModel, query):
    """Return ``(d_k, tau)`` for a raw query."""
    d = mean_knn_distance(model, query)
    return d, confidence(model, d)


@dataclass
class HistogramConfidence:
    """Bin counts over a regular grid spanning the training inputs."""

    lower: np.ndarray
    upper: np.ndarray
    counts: np.ndarray

    def __call__(self, query):
        q = np.atleast_2d(np.asarray(query, dtype=float))
        n_grid = self.counts.shape[0]
        inside = np.all((q >= self.lower) & (q <= self.upper), axis=1)
        rel = (q - self.lower) / (self.upper - self.lower)
        cells = np.clip((rel * n_grid).astype(int), 0, n_grid - 1)
        peak = self.counts.max()
        tau = np.zeros(len(q))
        tau[inside] = self.counts[tuple(cells[inside].T)] / peak
        return tau if np.ndim(query) > 1 else float(tau[0])


def histogram_confidence(training_inputs, n_grid: int) -> HistogramConfidence:
    """Histogram baseline with ``n_grid`` bins per input dimension."""
    if n_grid < 1:
        raise ConfigurationError("n_grid must be >= 1")
    data = np.asarray(training_inputs, dtype=float)
    lower, upper = data.min(axis=0), data.max(axis=0)
    upper = np.where(upper > lower, upper, lower + 1.0)
    counts, _ = np.histogramdd(data, bins=n_grid, range=list(zip(lower, upper)))
    return HistogramConfidence(lower, upper, counts)


def histogram_confidence_baseline(training_inputs, n_grid: int, query):
    return histogram_confidence(training_inputs, n_grid)(query)
