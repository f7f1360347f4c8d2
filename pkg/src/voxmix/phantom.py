"""Synthetic labeled volumes with smoothly varying mixture parameters.

The generator builds a chest-like label geometry (two "lung" ellipsoids
inside a "bone" shell over background), converts local label fractions into
smooth prior fields, perturbs per-class means and spreads with a low-order
sinusoid, and samples one observation per voxel from the resulting mixture.
Everything is deterministic given (spec, seed); sampling uses a counter-based
generator so each voxel's draw is independent of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from voxmix.kernel import KernelSpec, weighted_conv_raw
from voxmix.volume import (
    LabelVolume,
    ParameterField,
    Volume3D,
    check_dims,
    normalized_axes,
)

__all__ = [
    "PhantomSpec",
    "PhantomData",
    "procedural_labels",
    "neighborhood_priors",
    "parameter_fields",
    "sample_volume",
    "generate_phantom",
]

_FRACTION_BOUNDS = (0.05, 0.40)


@dataclass(frozen=True, eq=False)
class PhantomSpec:
    """Generation settings; defaults mimic CT-like contrast on the [0,1] scale.

    ``neighborhood_radius`` is the strict upper bound on the max-norm offset
    of a voxel's neighborhood, so the default 3 yields a 5x5x5 window.  The
    prior rescale maps a fraction f to (f + prior_shift) / prior_scale, and
    the defaults satisfy (1 + M * shift) / scale = 1 so priors stay a simplex.
    """

    dims: tuple
    n_components: int = 3
    base_mu: tuple = (1.0, 0.30, 0.75)
    base_sigma: tuple = (0.05, 0.05, 0.05)
    neighborhood_radius: int = 3
    prior_shift: float = 0.6
    prior_scale: float = 2.8
    perturb_amplitude: float = 0.25
    perturb_frequency: float = 8.0 * math.pi
    sigma_floor: float = 1e-4
    seed: int = 0
    label_source: str = "procedural"
    external_labels: LabelVolume | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "dims", check_dims(self.dims))
        if len(self.base_mu) != self.n_components or len(self.base_sigma) != self.n_components:
            raise ValueError("base parameter tuples must have one entry per class")
        if self.label_source not in ("procedural", "external"):
            raise ValueError(f"unknown label source {self.label_source!r}")
        if self.label_source == "external" and self.external_labels is None:
            raise ValueError("external label source needs external_labels")
        simplex = (1.0 + self.n_components * self.prior_shift) / self.prior_scale
        if abs(simplex - 1.0) > 1e-12:
            raise ValueError(
                f"prior rescale breaks the simplex: (1 + M*shift)/scale = {simplex}"
            )


@dataclass(frozen=True, eq=False)
class PhantomData:
    """Everything one phantom draw produces."""

    spec: PhantomSpec
    volume: Volume3D
    labels: LabelVolume
    geometry: LabelVolume
    theta: ParameterField


def _ellipsoid(x1, x2, x3, center, semi):
    q = (
        np.square((x1 - center[0]) / semi[0])
        + np.square((x2 - center[1]) / semi[1])
        + np.square((x3 - center[2]) / semi[2])
    )
    return q <= 1.0


def procedural_labels(dims, seed: int = 0) -> LabelVolume:
    """Two lung ellipsoids (label 2) in a bone shell (label 3) on background 1.

    A small seed-keyed jitter moves the lung centers so different seeds give
    distinct geometry while preserving the guarantees: the grid-center voxel
    stays inside a lung, and classes 2 and 3 each occupy 5-40% of voxels.
    """
    dims = check_dims(dims)
    x1, x2, x3 = normalized_axes(dims)
    jit = np.random.default_rng(seed).uniform(-0.02, 0.02, size=6)
    lung_a = _ellipsoid(x1, x2, x3, (0.35 + jit[0], 0.5 + jit[1], 0.5 + jit[2]),
                        (0.18, 0.24, 0.32))
    lung_b = _ellipsoid(x1, x2, x3, (0.65 + jit[3], 0.5 + jit[4], 0.5 + jit[5]),
                        (0.18, 0.24, 0.32))
    outer = _ellipsoid(x1, x2, x3, (0.5, 0.5, 0.5), (0.46, 0.46, 0.49))
    inner = _ellipsoid(x1, x2, x3, (0.5, 0.5, 0.5), (0.41, 0.41, 0.45))
    labels = np.ones(np.broadcast_shapes(x1.shape, x2.shape, x3.shape), dtype=np.uint8)
    labels[outer & ~inner] = 3
    labels[lung_a | lung_b] = 2
    total = labels.size
    for cls in (2, 3):
        frac = (labels == cls).sum() / total
        if not _FRACTION_BOUNDS[0] <= frac <= _FRACTION_BOUNDS[1]:
            raise ValueError(
                f"class {cls} fraction {frac:.3f} outside {_FRACTION_BOUNDS}; "
                f"grid {dims} too coarse for the default geometry"
            )
    return LabelVolume(dims, labels, 3)


def _box_kernel(width: int) -> KernelSpec:
    taps = np.ones(width, dtype=np.float64)
    # the bandwidth is irrelevant for unit taps; any positive value validates
    return KernelSpec(h=1.0, s=width, taps_x=taps, taps_y=taps, taps_z=taps)


def neighborhood_priors(labels: LabelVolume, radius: int = 3, shift: float = 0.6,
                        scale: float = 2.8) -> np.ndarray:
    """Smooth prior fields from in-bounds neighborhood label fractions.

    For each class, the fraction of that label within the voxel's window
    (side 2*(radius-1)+1; boundary windows use only in-bounds voxels), then
    the affine rescale (f + shift) / scale.  Returns shape (M, dz, dy, dx).
    """
    M = labels.n_classes
    if abs((1.0 + M * shift) / scale - 1.0) > 1e-12:
        raise ValueError(f"rescale constants break the simplex for M={M}")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    width = 2 * (radius - 1) + 1
    box = _box_kernel(width)
    dx, dy, dz = labels.dims
    counts = weighted_conv_raw(np.ones((dz, dy, dx)), box)
    pi = np.empty((M, dz, dy, dx))
    for m in range(M):
        ind = (labels.labels == m + 1).astype(np.float64)
        pi[m] = (weighted_conv_raw(ind, box) / counts + shift) / scale
    return pi


def parameter_fields(spec: PhantomSpec, priors: np.ndarray) -> ParameterField:
    """Attach sinusoidally perturbed means and spreads to the prior fields.

    mu_m(x) = base_mu_m + amplitude * sin(f*x1) * sin(f*x2) * sin(f*x3);
    sigma_m(x) = base_sigma_m * (1 + the same sinusoid), floored.
    """
    dx, dy, dz = spec.dims
    if priors.shape != (spec.n_components, dz, dy, dx):
        raise ValueError(f"priors shape {priors.shape} does not match spec dims {spec.dims}")
    x1, x2, x3 = normalized_axes(spec.dims)
    f = spec.perturb_frequency
    sinprod = np.sin(f * x1) * np.sin(f * x2) * np.sin(f * x3)
    mu = np.empty_like(priors)
    sigma = np.empty_like(priors)
    for m in range(spec.n_components):
        mu[m] = spec.base_mu[m] + spec.perturb_amplitude * sinprod
        sigma[m] = np.maximum(spec.base_sigma[m] * (1.0 + sinprod), spec.sigma_floor)
    return ParameterField(spec.dims, spec.n_components, np.ascontiguousarray(priors), mu, sigma)


def sample_volume(theta: ParameterField, seed: int = 0):
    """Draw one observation per voxel from the local mixture.

    Z ~ Categorical(pi(x)), then Y ~ Normal(mu_Z(x), sigma_Z(x)^2).  Returns
    (volume, realized labels).  The counter-based bit generator makes voxel
    draws a pure function of (seed, voxel index).
    """
    rng = np.random.Generator(np.random.Philox(seed))
    dx, dy, dz = theta.dims
    u = rng.random(size=(dz, dy, dx))
    g = rng.standard_normal(size=(dz, dy, dx))
    cum = np.cumsum(theta.pi, axis=0)
    z = (u[None, ...] >= cum).sum(axis=0)
    np.clip(z, 0, theta.n_components - 1, out=z)
    mu_z = np.take_along_axis(theta.mu, z[None], axis=0)[0]
    sg_z = np.take_along_axis(theta.sigma, z[None], axis=0)[0]
    vol = Volume3D(theta.dims, mu_z + sg_z * g)
    labels = LabelVolume(theta.dims, (z + 1).astype(np.uint8), theta.n_components)
    return vol, labels


def generate_phantom(spec: PhantomSpec) -> PhantomData:
    """Full pipeline: geometry, priors, parameter fields, one sampled volume."""
    if spec.label_source == "external":
        geometry = spec.external_labels
        if tuple(geometry.dims) != tuple(spec.dims):
            raise ValueError(
                f"external labels dims {geometry.dims} do not match spec dims {spec.dims}"
            )
    else:
        geometry = procedural_labels(spec.dims, spec.seed)
    priors = neighborhood_priors(
        geometry, radius=spec.neighborhood_radius, shift=spec.prior_shift,
        scale=spec.prior_scale,
    )
    theta = parameter_fields(spec, priors)
    volume, labels = sample_volume(theta, spec.seed)
    return PhantomData(spec=spec, volume=volume, labels=labels, geometry=geometry, theta=theta)
