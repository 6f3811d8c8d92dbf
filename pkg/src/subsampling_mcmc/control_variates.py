"""Clustered second-order Taylor control variates.

The lag pairs ``z_k`` are clustered once before sampling.  Within cluster
``c`` every contribution is approximated by the second-order expansion of
``z -> l(theta, z)`` around the centroid ``z_c``.  Summing the expansions over
a cluster only needs the moment summaries

    n_c = |c|,   s_c = sum (z_k - z_c),   S_c = sum (z_k - z_c)(z_k - z_c)^T

so the total proxy ``q(theta)`` costs ``K`` derivative evaluations instead of
``n``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import InvalidConfigurationError, InvalidInputError
from .models import AR1Model, DataSet

SUMMARY_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ClusterSummaries:
    centroids: np.ndarray  # (K, 2)
    counts: np.ndarray  # (K,)
    dev_sums: np.ndarray  # (K, 2)
    outer_sums: np.ndarray  # (K, 2, 2)
    assignment: np.ndarray  # (n_eff,)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_eff(self) -> int:
        return self.assignment.size

    @classmethod
    def from_assignment(cls, z, assignment, K) -> "ClusterSummaries":
        """Build summaries with centroids at the cluster means."""
        z = np.asarray(z, dtype=float)
        assignment = np.asarray(assignment, dtype=np.int64)
        counts = np.bincount(assignment, minlength=K)
        if np.any(counts == 0):
            raise InvalidConfigurationError("every cluster must contain at least one point")
        centroids = np.column_stack(
            [np.bincount(assignment, weights=z[:, j], minlength=K) for j in range(2)]
        ) / counts[:, None]
        return cls.from_centroids(z, assignment, centroids)

    @classmethod
    def from_centroids(cls, z, assignment, centroids) -> "ClusterSummaries":
        z = np.asarray(z, dtype=float)
        assignment = np.asarray(assignment, dtype=np.int64)
        centroids = np.asarray(centroids, dtype=float)
        K = centroids.shape[0]
        counts = np.bincount(assignment, minlength=K)
        dev = z - centroids[assignment]
        dev_sums = np.column_stack(
            [np.bincount(assignment, weights=dev[:, j], minlength=K) for j in range(2)]
        )
        outer = np.empty((K, 2, 2))
        for i in range(2):
            for j in range(i, 2):
                outer[:, i, j] = np.bincount(
                    assignment, weights=dev[:, i] * dev[:, j], minlength=K
                )
                outer[:, j, i] = outer[:, i, j]
        for arr in (centroids, counts, dev_sums, outer, assignment):
            arr.flags.writeable = False
        return cls(centroids, counts, dev_sums, outer, assignment)

    def to_json(self, path) -> None:
        """Write a versioned JSON sidecar (header, then one record per cluster)."""
        doc = {
            "version": SUMMARY_FORMAT_VERSION,
            "K": self.K,
            "n_eff": self.n_eff,
            "clusters": [
                {
                    "centroid": self.centroids[c].tolist(),
                    "count": int(self.counts[c]),
                    "dev_sum": self.dev_sums[c].tolist(),
                    "outer_sum": self.outer_sums[c].tolist(),
                }
                for c in range(self.K)
            ],
            "assignment": self.assignment.tolist(),
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def from_json(cls, path) -> "ClusterSummaries":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != SUMMARY_FORMAT_VERSION:
            raise InvalidInputError(f"unsupported summary format version {doc.get('version')}")
        recs = doc["clusters"]
        if len(recs) != doc["K"] or len(doc["assignment"]) != doc["n_eff"]:
            raise InvalidInputError("summary header does not match its records")
        arrays = (
            np.array([r["centroid"] for r in recs], dtype=float).reshape(-1, 2),
            np.array([r["count"] for r in recs], dtype=np.int64),
            np.array([r["dev_sum"] for r in recs], dtype=float).reshape(-1, 2),
            np.array([r["outer_sum"] for r in recs], dtype=float).reshape(-1, 2, 2),
            np.array(doc["assignment"], dtype=np.int64),
        )
        for arr in arrays:
            arr.flags.writeable = False
        return cls(*arrays)


def _fill_empty_clusters(z, labels, centroids):
    # Move the point farthest from its centroid into each empty cluster.
    K = centroids.shape[0]
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=K)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels
        dist = np.sum((z - centroids[labels]) ** 2, axis=1)
        dist[counts[labels] <= 1] = -1.0  # never empty another cluster
        far = int(np.argmax(dist))
        labels[far] = empty[0]
        centroids = centroids.copy()
        centroids[empty[0]] = z[far]


def cluster_data(data: DataSet, K: int, seed: int) -> ClusterSummaries:
    """k-means (k-means++ start) on the lag pairs; centroids are cluster means."""
    z = data.z
    n_eff = data.n_eff
    K = int(K)
    if not 1 <= K <= n_eff:
        raise InvalidConfigurationError(f"K must lie in [1, n_eff={n_eff}], got {K}")
    if K == n_eff:
        return ClusterSummaries.from_centroids(z, np.arange(n_eff), z.copy())
    km = KMeans(
        n_clusters=K,
        init="k-means++",
        n_init=1,
        max_iter=100,
        tol=1e-6,
        random_state=seed,
        algorithm="lloyd",
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(z)
    labels = _fill_empty_clusters(z, km.labels_.astype(np.int64), km.cluster_centers_)
    return ClusterSummaries.from_assignment(z, labels, K)


def q_sum(model: AR1Model, theta, summaries: ClusterSummaries) -> float:
    """Total control variate ``q(theta)``; exactly ``K`` derivative evaluations."""
    value, grad, hess = model._value_grad_hess(model.check_theta(theta), summaries.centroids)
    return _q_from_derivs(summaries, value, grad, hess)


def _q_from_derivs(summaries, value, grad, hess):
    per_cluster = (
        summaries.counts * value
        + np.einsum("kj,kj->k", grad, summaries.dev_sums)
        + 0.5 * np.einsum("kij,kji->k", hess, summaries.outer_sums)
    )
    return float(np.sum(per_cluster))


class ProxyState:
    """Control variates evaluated at one ``theta``.

    Holds the centroid derivatives so that the residual of any contribution
    can be formed without further expansion-point evaluations.
    """

    def __init__(self, model: AR1Model, theta, data: DataSet, summaries: ClusterSummaries):
        self.model = model
        self.theta = theta
        self.data = data
        self.summaries = summaries
        self.value, self.grad, self.hess = model._value_grad_hess(theta, summaries.centroids)
        self.q = _q_from_derivs(summaries, self.value, self.grad, self.hess)

    def proxies(self, idx) -> np.ndarray:
        c = self.summaries.assignment[idx]
        dev = self.data.z[idx] - self.summaries.centroids[c]
        return (
            self.value[c]
            + np.einsum("kj,kj->k", self.grad[c], dev)
            + 0.5 * np.einsum("ki,kij,kj->k", dev, self.hess[c], dev)
        )

    def residuals(self, idx=None) -> np.ndarray:
        """``d_k = l_k - q_k`` for the contributions ``idx`` (all if None)."""
        if idx is None:
            idx = np.arange(self.data.n_eff)
        idx = np.asarray(idx, dtype=np.int64)
        return self.model._contrib(self.theta, self.data.z[idx]) - self.proxies(idx)


def residual(model, theta, data, k, summaries) -> float:
    """Residual of contribution ``k`` (0-based) around its assigned centroid."""
    if not 0 <= int(k) < data.n_eff:
        raise IndexError(f"contribution index {k} out of range [0, {data.n_eff})")
    state = ProxyState(model, model.check_theta(theta), data, summaries)
    return float(state.residuals([int(k)])[0])


def sigma2_b(d_values, m_b) -> float:
    """Variance of a with-replacement batch estimate: ``(n/m_b) sum (d_k - dbar)^2``."""
    d_values = np.asarray(d_values, dtype=float)
    if m_b <= 0:
        raise InvalidConfigurationError("m_b must be positive")
    centered = d_values - d_values.mean()
    return float(d_values.size / m_b * np.dot(centered, centered))


def residual_stats(model, theta, data, summaries, m_b):
    """Exact ``(d, sigma2_b, m_b)`` from a full pass over the data."""
    state = ProxyState(model, model.check_theta(theta), data, summaries)
    d_k = state.residuals()
    return float(np.sum(d_k)), sigma2_b(d_k, m_b), int(m_b)


class ClusterControlVariates(BaseEstimator):
    """Estimator wrapper: ``fit`` clusters lag pairs, ``predict`` assigns new ones.

    Parameters
    ----------
    n_clusters : int
        Number of clusters ``K``.
    random_state : int
        Seed for the k-means++ initialization.
    """

    def __init__(self, n_clusters=100, random_state=0):
        self.n_clusters = n_clusters
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        if X.shape[1] != 2:
            raise InvalidInputError("X must hold lag pairs (n_samples, 2)")
        if X.shape[0] < 1:
            raise InvalidInputError("X is empty")
        self.summaries_ = cluster_data(_PairData(X), self.n_clusters, self.random_state)
        self.cluster_centers_ = self.summaries_.centroids
        self.labels_ = self.summaries_.assignment
        return self

    def predict(self, X):
        check_is_fitted(self, "summaries_")
        X = check_array(X, dtype=float)
        d2 = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


class _PairData:
    """Minimal stand-in for DataSet when only the pairs are known."""

    def __init__(self, z):
        self.z = z
        self.n_eff = z.shape[0]
