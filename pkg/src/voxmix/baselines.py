"""Spatially constant comparison methods: scalar k-means and a global GMM.

Both fit a single parameter triple (pi, mu, sigma) per class from the masked
sample values and broadcast it onto the voxel grid, so metric code treats
them exactly like the spatially varying fit.  Components are ordered by
ascending mu everywhere so cross-method comparisons align classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from voxmix.volume import LabelVolume, ParameterField, SampleMask, Volume3D, check_dims

__all__ = [
    "GlobalTheta",
    "kmeans",
    "gmm_fit_global",
    "baseline_predict",
    "baseline_labels",
    "baseline_field",
    "ScalarKMeans",
    "GlobalGaussianMixture",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GlobalTheta:
    """One constant (pi, mu, sigma) triple per mixture component."""

    n_components: int
    pi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("pi", "mu", "sigma"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.n_components,):
                raise ValueError(f"{name} must have shape ({self.n_components},)")
            object.__setattr__(self, name, arr)
        if abs(self.pi.sum() - 1.0) > 1e-10:
            raise ValueError(f"priors sum to {self.pi.sum()}, not 1")
        if (self.pi < 0).any():
            raise ValueError("negative prior")
        if (self.sigma <= 0).any():
            raise ValueError("sigma must be positive")

    def to_dict(self) -> dict:
        return {
            "M": self.n_components,
            "pi": self.pi.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalTheta":
        return cls(int(d["M"]), np.asarray(d["pi"]), np.asarray(d["mu"]), np.asarray(d["sigma"]))


def _check_values(values, M: int) -> np.ndarray:
    vals = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ValueError("no sample values")
    if np.unique(vals).size < M:
        raise ValueError(f"need at least {M} distinct values, got {np.unique(vals).size}")
    return vals


def kmeans(values, M: int, seed: int = 0, max_iter: int = 100):
    """Lloyd's algorithm on scalars with deterministic quantile init.

    Returns (centroids, assignments) with centroids sorted ascending.  Empty
    clusters are reseeded to the point farthest from its current centroid.
    The seed only matters as a tiebreak source and is kept for signature
    stability; the quantile init makes runs reproducible without it.
    """
    vals = _check_values(values, M)
    centroids = np.quantile(vals, (2 * np.arange(M) + 1) / (2 * M))
    # distinct starting points, else duplicate centroids can never separate
    for m in range(1, M):
        if centroids[m] <= centroids[m - 1]:
            centroids[m] = np.nextafter(centroids[m - 1], np.inf)
    assign = np.zeros(vals.size, dtype=np.int64)
    for _ in range(max_iter):
        d2 = np.square(vals[:, None] - centroids[None, :])
        new_assign = np.argmin(d2, axis=1)
        for m in range(M):
            sel = new_assign == m
            if sel.any():
                centroids[m] = vals[sel].mean()
            else:
                far = int(np.argmax(d2[np.arange(vals.size), new_assign]))
                centroids[m] = vals[far]
                new_assign[far] = m
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    order = np.argsort(centroids, kind="stable")
    centroids = centroids[order]
    relabel = np.empty(M, dtype=np.int64)
    relabel[order] = np.arange(M)
    return centroids, relabel[assign]


def kmeans_theta(values, M: int, seed: int = 0, sigma_floor: float = 1e-4) -> GlobalTheta:
    """Package k-means output as mixture-shaped parameters.

    mu is the centroid, pi the cluster share, and sigma the within-cluster
    standard deviation (floored), so the same metrics apply as to model fits.
    """
    vals = _check_values(values, M)
    centroids, assign = kmeans(vals, M, seed=seed)
    pi = np.empty(M)
    sigma = np.empty(M)
    for m in range(M):
        sel = assign == m
        pi[m] = sel.mean()
        sigma[m] = max(vals[sel].std() if sel.any() else 0.0, sigma_floor)
    return GlobalTheta(M, pi / pi.sum(), centroids, sigma)


def gmm_fit_global(values, M: int, init: GlobalTheta | None = None, tol: float = 1e-8,
                   max_iter: int = 500, sigma_floor: float = 1e-4, seed: int = 0):
    """Classical EM for a constant-parameter Gaussian mixture on scalars.

    Returns (GlobalTheta, loglik_trace).  The average log-likelihood is
    non-decreasing per iteration up to rounding; a drop beyond 1e-9 raises,
    as does a component collapsing onto zero weight.
    """
    vals = _check_values(values, M)
    n = vals.size
    if init is None:
        init = kmeans_theta(vals, M, seed=seed, sigma_floor=sigma_floor)
    pi = init.pi.copy()
    mu = init.mu.copy()
    sigma = np.maximum(init.sigma, sigma_floor)
    trace: list[float] = []
    for _ in range(max_iter):
        z = (vals[None, :] - mu[:, None]) / sigma[:, None]
        with np.errstate(divide="ignore"):
            log_w = -0.5 * z * z - 0.5 * _LOG_2PI - np.log(sigma)[:, None] + np.log(pi)[:, None]
        top = log_w.max(axis=0)
        norm = np.exp(log_w - top[None, :]).sum(axis=0)
        loglik = float((top + np.log(norm)).mean())
        if trace and loglik < trace[-1] - 1e-9:
            raise RuntimeError(f"log-likelihood decreased: {trace[-1]} -> {loglik}")
        converged = bool(trace) and abs(loglik - trace[-1]) < tol
        trace.append(loglik)
        if converged:
            break
        resp = np.exp(log_w - top[None, :]) / norm[None, :]
        weight = resp.sum(axis=1)
        if (weight <= 0).any():
            raise RuntimeError("component collapsed to zero weight")
        pi = weight / n
        mu = resp @ vals / weight
        var = (resp * np.square(vals[None, :] - mu[:, None])).sum(axis=1) / weight
        sigma = np.maximum(np.sqrt(var), sigma_floor)
    order = np.argsort(mu, kind="stable")
    theta = GlobalTheta(M, pi[order] / pi[order].sum(), mu[order], sigma[order])
    return theta, np.asarray(trace)


def baseline_predict(theta: GlobalTheta) -> float:
    """Bandwidth-independent response prediction sum_m pi_m * mu_m."""
    return float(theta.pi @ theta.mu)


def baseline_labels(theta: GlobalTheta, v: Volume3D) -> LabelVolume:
    """Per-voxel most probable class under the constant mixture.

    Maximizes pi_m * phi((y - mu_m)/sigma_m) / sigma_m; ties break toward the
    smallest class index.  For k-means-shaped theta with equal sigmas this
    reduces to the nearest-centroid rule up to prior weighting.
    """
    y = v.data[None, ...]
    z = (y - theta.mu[:, None, None, None]) / theta.sigma[:, None, None, None]
    with np.errstate(divide="ignore"):
        score = -0.5 * z * z - np.log(theta.sigma)[:, None, None, None] \
            + np.log(theta.pi)[:, None, None, None]
    labels = (score.argmax(axis=0) + 1).astype(np.uint8)
    return LabelVolume(v.dims, labels, theta.n_components)


def nearest_centroid_labels(centroids, v: Volume3D) -> LabelVolume:
    """Hard assignment of each voxel to its nearest centroid (k-means rule)."""
    c = np.asarray(centroids, dtype=np.float64)
    d2 = np.square(v.data[None, ...] - c[:, None, None, None])
    return LabelVolume(v.dims, (d2.argmin(axis=0) + 1).astype(np.uint8), c.size)


def baseline_field(theta: GlobalTheta, dims) -> ParameterField:
    """Broadcast constant parameters onto the voxel grid."""
    dims = check_dims(dims)
    dx, dy, dz = dims
    shape = (theta.n_components, dz, dy, dx)
    return ParameterField(
        dims,
        theta.n_components,
        np.broadcast_to(theta.pi[:, None, None, None], shape).copy(),
        np.broadcast_to(theta.mu[:, None, None, None], shape).copy(),
        np.broadcast_to(theta.sigma[:, None, None, None], shape).copy(),
    )


def _masked_values(v: Volume3D, mask: SampleMask | None) -> np.ndarray:
    if mask is None:
        return v.flat
    if tuple(mask.dims) != tuple(v.dims):
        raise ValueError(f"dims mismatch: {v.dims} vs {mask.dims} for mask")
    return v.data[mask.included]


class ScalarKMeans(BaseEstimator):
    """k-means over voxel intensities, exposed with the estimator API.

    Parameters
    ----------
    n_components : int
        Number of clusters.
    seed : int
        Kept for API symmetry; the deterministic quantile init ignores it.
    max_iter : int
        Lloyd iteration cap.
    sigma_floor : float
        Lower bound for the within-cluster standard deviations.
    """

    def __init__(self, n_components=3, seed=0, max_iter=100, sigma_floor=1e-4):
        self.n_components = n_components
        self.seed = seed
        self.max_iter = max_iter
        self.sigma_floor = sigma_floor

    def fit(self, volume: Volume3D, mask: SampleMask | None = None):
        vals = _masked_values(volume, mask)
        self.theta_ = kmeans_theta(
            vals, self.n_components, seed=self.seed, sigma_floor=self.sigma_floor
        )
        self.centroids_ = self.theta_.mu.copy()
        return self

    def _check_fitted(self):
        if not hasattr(self, "theta_"):
            raise NotFittedError("this ScalarKMeans instance is not fitted yet")

    def predict(self, volume: Volume3D) -> LabelVolume:
        self._check_fitted()
        return nearest_centroid_labels(self.centroids_, volume)

    def parameter_field(self, dims) -> ParameterField:
        self._check_fitted()
        return baseline_field(self.theta_, dims)


class GlobalGaussianMixture(BaseEstimator):
    """Constant-parameter Gaussian mixture fit by EM, estimator-API wrapper.

    Parameters
    ----------
    n_components : int
        Number of mixture components.
    tol : float
        Convergence threshold on the average log-likelihood change.
    max_iter : int
        EM iteration cap.
    sigma_floor : float
        Lower bound applied to component standard deviations.
    seed : int
        Passed to the k-means initializer for signature stability.
    """

    def __init__(self, n_components=3, tol=1e-8, max_iter=500, sigma_floor=1e-4, seed=0):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.sigma_floor = sigma_floor
        self.seed = seed

    def fit(self, volume: Volume3D, mask: SampleMask | None = None):
        vals = _masked_values(volume, mask)
        self.theta_, self.loglik_trace_ = gmm_fit_global(
            vals,
            self.n_components,
            tol=self.tol,
            max_iter=self.max_iter,
            sigma_floor=self.sigma_floor,
            seed=self.seed,
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "theta_"):
            raise NotFittedError("this GlobalGaussianMixture instance is not fitted yet")

    def predict(self, volume: Volume3D) -> LabelVolume:
        self._check_fitted()
        return baseline_labels(self.theta_, volume)

    def predict_response(self) -> float:
        self._check_fitted()
        return baseline_predict(self.theta_)

    def parameter_field(self, dims) -> ParameterField:
        self._check_fitted()
        return baseline_field(self.theta_, dims)
