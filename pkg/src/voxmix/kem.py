"""Kernel-weighted EM for spatially varying Gaussian mixtures.

The model: at voxel position x (normalized to (0,1]^3) the observed scalar
follows a mixture with spatially varying weights pi_m(x), means mu_m(x), and
standard deviations sigma_m(x).  Estimation alternates a pointwise E-step
(posterior responsibilities at each sample voxel) with M-steps that are
kernel-weighted local averages:

    pi_m(x)    = conv(r_m) / conv(1)
    mu_m(x)    = conv(r_m * Y) / conv(r_m)
    sigma_m(x) = sqrt(conv(r_m * (Y - mu_m)^2) / conv(r_m))   [standard mode]

where conv is the masked truncated-Gaussian convolution and each M-step uses
responsibilities from the current iteration; sigma uses the freshly updated
mu.  Parameters are estimated at every voxel, with the mask restricting only
which voxels act as samples.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from voxmix.baselines import kmeans
from voxmix.kernel import KernelSpec, make_kernel, weighted_conv_raw
from voxmix.volume import (
    LabelVolume,
    ParameterField,
    SampleMask,
    Volume3D,
    VoxelCoord,
    check_same_dims,
)

__all__ = [
    "FitConfig",
    "Responsibilities",
    "FitResult",
    "init_params",
    "e_step",
    "m_step_pi",
    "m_step_mu",
    "m_step_sigma",
    "kem_fit",
    "local_loglik",
    "predict_response",
    "posterior_volume",
    "hard_labels",
    "LocalGaussianMixture",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class FitConfig:
    """Settings for one kernel-weighted EM fit."""

    M: int
    kernel: KernelSpec
    max_iter: int = 50
    tol: float = 1e-4
    sigma_floor: float = 1e-4
    sigma_init: float = 0.05
    sigma_numerator_mode: str = "standard"
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")
        if self.sigma_numerator_mode not in ("standard", "paper_literal"):
            raise ValueError(f"unknown sigma numerator mode {self.sigma_numerator_mode!r}")


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """Per-voxel class posteriors r_m, shape (M, dz, dy, dx)."""

    dims: tuple[int, int, int]
    n_components: int
    r: np.ndarray

    def __post_init__(self):
        dx, dy, dz = self.dims
        r = np.ascontiguousarray(self.r, dtype=np.float64)
        if r.shape != (self.n_components, dz, dy, dx):
            raise ValueError(f"responsibilities shape {r.shape} does not match dims {self.dims}")
        object.__setattr__(self, "r", r)

    def validate(self, mask: SampleMask | None = None, tol: float = 1e-12) -> None:
        if mask is None:
            vals = self.r.reshape(self.n_components, -1)
        else:
            vals = self.r[:, mask.included]
        if vals.min() < 0:
            raise ValueError("negative responsibility")
        err = np.abs(vals.sum(axis=0) - 1.0).max()
        if err > tol:
            raise ValueError(f"responsibilities sum to 1 within {err:.3e} > {tol:.1e}")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Fitted parameter fields plus convergence diagnostics."""

    theta: ParameterField
    iterations: int
    final_change: float
    converged: bool
    loglik_trace: np.ndarray = field(repr=False)
    probe_voxels: tuple = ()
    carried_voxels: int = 0


def init_params(v: Volume3D, mask: SampleMask, cfg: FitConfig) -> ParameterField:
    """Flat starting fields: equal priors, k-means centroids, constant sigma."""
    check_same_dims(v, mask, "mask")
    centroids, _ = kmeans(v.data[mask.included], cfg.M, seed=cfg.seed)
    dx, dy, dz = v.dims
    shape = (cfg.M, dz, dy, dx)
    return ParameterField(
        v.dims,
        cfg.M,
        np.full(shape, 1.0 / cfg.M),
        np.broadcast_to(centroids[:, None, None, None], shape).copy(),
        np.full(shape, cfg.sigma_init),
    )


def _log_class_weights(y: np.ndarray, theta: ParameterField) -> np.ndarray:
    """log of pi_m/sigma_m * phi((y - mu_m)/sigma_m), up to the shared phi constant."""
    z = (y[None, ...] - theta.mu) / theta.sigma
    with np.errstate(divide="ignore"):
        return -0.5 * z * z - np.log(theta.sigma) + np.log(theta.pi)


def _responsibility_fields(y: np.ndarray, theta: ParameterField) -> np.ndarray:
    a = _log_class_weights(y, theta)
    a -= a.max(axis=0)[None, ...]
    w = np.exp(a)
    return w / w.sum(axis=0)[None, ...]


def e_step(v: Volume3D, mask: SampleMask, theta: ParameterField) -> Responsibilities:
    """Posterior class probabilities at every voxel, stabilized in log space.

    Only the masked voxels act as samples downstream, but the formula is
    pointwise so it is evaluated everywhere at no structural cost.
    """
    check_same_dims(v, mask, "mask")
    check_same_dims(v, theta, "theta")
    return Responsibilities(v.dims, theta.n_components, _responsibility_fields(v.data, theta))


def _ratio_with_carry(num: np.ndarray, den: np.ndarray, prev: np.ndarray):
    """num/den where den != 0; carry prev through where the window saw no mass."""
    empty = den == 0.0
    out = np.divide(num, den, out=prev.copy(), where=~empty)
    return out, int(empty.sum())


def m_step_pi(resp: Responsibilities, mask: SampleMask, kernel: KernelSpec,
              prev_pi: np.ndarray):
    """Local prior update conv(r_m)/conv(1) over the masked samples.

    Returns (pi fields, number of carried voxel-fields).  Voxels whose window
    contains no samples keep their previous value.
    """
    inc = mask.included.astype(np.float64)
    den = weighted_conv_raw(inc, kernel)
    out = np.empty_like(resp.r)
    carried = 0
    for m in range(resp.n_components):
        out[m], c = _ratio_with_carry(
            weighted_conv_raw(resp.r[m] * inc, kernel), den, prev_pi[m]
        )
        carried += c
    return out, carried


def m_step_mu(v: Volume3D, resp: Responsibilities, mask: SampleMask, kernel: KernelSpec,
              prev_mu: np.ndarray):
    """Local mean update conv(r_m * Y)/conv(r_m)."""
    inc = mask.included.astype(np.float64)
    out = np.empty_like(resp.r)
    carried = 0
    for m in range(resp.n_components):
        rm = resp.r[m] * inc
        out[m], c = _ratio_with_carry(
            weighted_conv_raw(rm * v.data, kernel), weighted_conv_raw(rm, kernel), prev_mu[m]
        )
        carried += c
    return out, carried


def m_step_sigma(v: Volume3D, resp: Responsibilities, mu_next: np.ndarray, mask: SampleMask,
                 kernel: KernelSpec, mode: str, sigma_floor: float, prev_sigma: np.ndarray):
    """Local spread update, floored at sigma_floor after the square root.

    mode "standard" weights squared residuals by the responsibilities,
    keeping the step the maximizer of the local objective; "paper_literal"
    drops that weight from the numerator.  Residuals use the freshly updated
    mu evaluated at each sample's own position.
    """
    if mode not in ("standard", "paper_literal"):
        raise ValueError(f"unknown sigma numerator mode {mode!r}")
    inc = mask.included.astype(np.float64)
    out = np.empty_like(resp.r)
    carried = 0
    for m in range(resp.n_components):
        rm = resp.r[m] * inc
        sq = np.square(v.data - mu_next[m])
        num = sq * inc if mode == "paper_literal" else sq * rm
        var, c = _ratio_with_carry(
            weighted_conv_raw(num, kernel),
            weighted_conv_raw(rm, kernel),
            np.square(prev_sigma[m]),
        )
        out[m] = np.maximum(np.sqrt(var), sigma_floor)
        carried += c
    return out, carried


def default_probe_voxels(dims) -> tuple[VoxelCoord, ...]:
    """Center plus four quarter-position voxels, used for the fit trace."""
    dx, dy, dz = dims
    picks = [
        (dx // 2, dy // 2, dz // 2),
        (dx // 4, dy // 4, dz // 4),
        (3 * dx // 4, dy // 4, 3 * dz // 4),
        (dx // 4, 3 * dy // 4, 3 * dz // 4),
        (3 * dx // 4, 3 * dy // 4, dz // 4),
    ]
    seen = []
    for p in picks:
        if p not in seen:
            seen.append(p)
    return tuple(VoxelCoord(dims, *p) for p in seen)


def local_loglik(v: Volume3D, mask: SampleMask, theta: ParameterField, kernel: KernelSpec,
                 probe_voxels) -> list[float]:
    """Kernel-weighted local log-likelihood at each probe voxel.

    At probe x with the fit's parameters frozen to theta(x), sums over masked
    samples X_i in the window: K3((X_i-x)/h) * log mixture density of Y_i.
    Diagnostic only; the iteration is not asserted monotone in this value.
    """
    check_same_dims(v, mask, "mask")
    check_same_dims(v, theta, "theta")
    c = kernel.half
    dx, dy, dz = v.dims
    out = []
    for p in probe_voxels:
        if tuple(p.dims) != tuple(v.dims):
            raise ValueError(f"probe dims {p.dims} do not match volume dims {v.dims}")
        lo = (max(p.i - c, 0), max(p.j - c, 0), max(p.k - c, 0))
        hi = (min(p.i + c, dx - 1), min(p.j + c, dy - 1), min(p.k + c, dz - 1))
        ys = v.data[lo[2] : hi[2] + 1, lo[1] : hi[1] + 1, lo[0] : hi[0] + 1]
        inc = mask.included[lo[2] : hi[2] + 1, lo[1] : hi[1] + 1, lo[0] : hi[0] + 1]
        tx = kernel.taps_x[lo[0] - p.i + c : hi[0] - p.i + c + 1]
        ty = kernel.taps_y[lo[1] - p.j + c : hi[1] - p.j + c + 1]
        tz = kernel.taps_z[lo[2] - p.k + c : hi[2] - p.k + c + 1]
        w = tz[:, None, None] * ty[None, :, None] * tx[None, None, :]
        pi = theta.pi[:, p.k, p.j, p.i][:, None, None, None]
        mu = theta.mu[:, p.k, p.j, p.i][:, None, None, None]
        sg = theta.sigma[:, p.k, p.j, p.i][:, None, None, None]
        z = (ys[None, ...] - mu) / sg
        with np.errstate(divide="ignore"):
            a = -0.5 * z * z - 0.5 * _LOG_2PI - np.log(sg) + np.log(pi)
        top = a.max(axis=0)
        logmix = top + np.log(np.exp(a - top[None, ...]).sum(axis=0))
        out.append(float((w * logmix)[inc].sum()))
    return out


def kem_fit(v: Volume3D, mask: SampleMask, cfg: FitConfig, probe_voxels=None,
            iteration_callback=None) -> FitResult:
    """Run the kernel-weighted EM loop to convergence or max_iter.

    Stops when the max-abs change across all parameter fields drops below
    cfg.tol.  ``iteration_callback(iteration, max_change, seconds)`` fires
    after each iteration when given.
    """
    check_same_dims(v, mask, "mask")
    if probe_voxels is None:
        probe_voxels = default_probe_voxels(v.dims)
    theta = init_params(v, mask, cfg)
    trace = []
    carried_total = 0
    change = np.inf
    iterations = 0
    for it in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        resp = e_step(v, mask, theta)
        pi, c1 = m_step_pi(resp, mask, cfg.kernel, theta.pi)
        mu, c2 = m_step_mu(v, resp, mask, cfg.kernel, theta.mu)
        sigma, c3 = m_step_sigma(
            v, resp, mu, mask, cfg.kernel, cfg.sigma_numerator_mode, cfg.sigma_floor, theta.sigma
        )
        carried_total += c1 + c2 + c3
        change = max(
            np.abs(pi - theta.pi).max(),
            np.abs(mu - theta.mu).max(),
            np.abs(sigma - theta.sigma).max(),
        )
        theta = ParameterField(v.dims, cfg.M, pi, mu, sigma)
        trace.append(local_loglik(v, mask, theta, cfg.kernel, probe_voxels))
        iterations = it
        if iteration_callback is not None:
            iteration_callback(it, float(change), time.perf_counter() - t0)
        if change < cfg.tol:
            break
    return FitResult(
        theta=theta,
        iterations=iterations,
        final_change=float(change),
        converged=bool(change < cfg.tol),
        loglik_trace=np.asarray(trace),
        probe_voxels=tuple(probe_voxels),
        carried_voxels=carried_total,
    )


def predict_response(theta: ParameterField, voxels: SampleMask | None = None) -> Volume3D:
    """Mixture-mean prediction sum_m pi_m(x) * mu_m(x) per voxel.

    With ``voxels`` given, values outside the mask are zeroed; consumers that
    score predictions restrict to the same mask.
    """
    pred = np.einsum("mzyx,mzyx->zyx", theta.pi, theta.mu)
    if voxels is not None:
        check_same_dims(theta, voxels, "voxels")
        pred = np.where(voxels.included, pred, 0.0)
    return Volume3D(theta.dims, np.ascontiguousarray(pred))


def posterior_volume(v: Volume3D, theta: ParameterField, class_index: int) -> Volume3D:
    """Posterior probability field of one class (1-based index) at every voxel."""
    check_same_dims(v, theta, "theta")
    if not 1 <= class_index <= theta.n_components:
        raise ValueError(f"class index {class_index} outside 1..{theta.n_components}")
    r = _responsibility_fields(v.data, theta)
    return Volume3D(v.dims, np.ascontiguousarray(r[class_index - 1]))


def hard_labels(resp: Responsibilities) -> LabelVolume:
    """Most responsible class per voxel; ties go to the smallest class index."""
    labels = (resp.r.argmax(axis=0) + 1).astype(np.uint8)
    return LabelVolume(resp.dims, labels, resp.n_components)


class LocalGaussianMixture(BaseEstimator):
    """Spatially varying Gaussian mixture fit by kernel-weighted EM.

    Parameters
    ----------
    n_components : int
        Mixture component count M.
    h : float
        Kernel bandwidth in normalized-coordinate units.
    s : int
        Odd truncated filter size in voxels per axis.
    max_iter : int
        EM iteration cap.
    tol : float
        Convergence threshold on the max-abs parameter field change.
    sigma_floor : float
        Lower bound on fitted standard deviations.
    sigma_init : float
        Starting value for all sigma fields.
    sigma_numerator_mode : {"standard", "paper_literal"}
        Whether the spread update weights residuals by responsibilities.
    seed : int
        Passed to the k-means initializer.
    """

    def __init__(self, n_components=3, h=0.05, s=5, max_iter=50, tol=1e-4,
                 sigma_floor=1e-4, sigma_init=0.05, sigma_numerator_mode="standard", seed=0):
        self.n_components = n_components
        self.h = h
        self.s = s
        self.max_iter = max_iter
        self.tol = tol
        self.sigma_floor = sigma_floor
        self.sigma_init = sigma_init
        self.sigma_numerator_mode = sigma_numerator_mode
        self.seed = seed

    def _config(self, dims) -> FitConfig:
        return FitConfig(
            M=self.n_components,
            kernel=make_kernel(self.h, self.s, dims),
            max_iter=self.max_iter,
            tol=self.tol,
            sigma_floor=self.sigma_floor,
            sigma_init=self.sigma_init,
            sigma_numerator_mode=self.sigma_numerator_mode,
            seed=self.seed,
        )

    def fit(self, volume: Volume3D, mask: SampleMask | None = None, iteration_callback=None):
        if mask is None:
            mask = SampleMask.full(volume.dims)
        self.result_ = kem_fit(
            volume, mask, self._config(volume.dims), iteration_callback=iteration_callback
        )
        self.theta_ = self.result_.theta
        self.n_iter_ = self.result_.iterations
        return self

    def _check_fitted(self):
        if not hasattr(self, "theta_"):
            raise NotFittedError("this LocalGaussianMixture instance is not fitted yet")

    def predict(self, volume: Volume3D) -> LabelVolume:
        self._check_fitted()
        check_same_dims(volume, self.theta_, "theta")
        r = _responsibility_fields(volume.data, self.theta_)
        return hard_labels(Responsibilities(volume.dims, self.theta_.n_components, r))

    def predict_response(self, voxels: SampleMask | None = None) -> Volume3D:
        self._check_fitted()
        return predict_response(self.theta_, voxels)

    def posterior(self, volume: Volume3D, class_index: int) -> Volume3D:
        self._check_fitted()
        return posterior_volume(volume, self.theta_, class_index)
