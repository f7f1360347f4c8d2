"""Separable truncated Gaussian kernel and masked weighted 3D convolution.

The convolution primitive computes, at every output voxel x,

    sum over included voxels X_i within the s^3 window of
        K3((X_i - x) / h) * field(X_i)

where K3 is the product of three 1D Gaussian densities evaluated at
normalized-coordinate offsets.  Out-of-bounds neighbors contribute nothing
and taps are deliberately left unnormalized: every consumer divides two such
sums over the same neighborhood, so boundary weight loss and the missing
normalizing constant cancel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from voxmix.volume import SampleMask, Volume3D, check_dims, check_same_dims

__all__ = [
    "KernelSpec",
    "make_kernel",
    "weighted_conv",
    "weighted_conv_raw",
    "conv_direct_window",
    "conv_direct_reference",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gauss1d(t: np.ndarray) -> np.ndarray:
    """Standard normal density exp(-t^2/2)/sqrt(2*pi)."""
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(t))


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Per-axis tap vectors for a truncated Gaussian of bandwidth h, size s."""

    h: float
    s: int
    taps_x: np.ndarray
    taps_y: np.ndarray
    taps_z: np.ndarray

    def __post_init__(self):
        if self.s < 1 or self.s % 2 == 0:
            raise ValueError(f"filter size must be odd and >= 1, got {self.s}")
        if not self.h > 0:
            raise ValueError(f"bandwidth must be positive, got {self.h}")
        for name in ("taps_x", "taps_y", "taps_z"):
            taps = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if taps.shape != (self.s,):
                raise ValueError(f"{name} must have length s={self.s}")
            if not (taps > 0).all():
                raise ValueError(f"{name} must be strictly positive")
            if not np.array_equal(taps, taps[::-1]):
                raise ValueError(f"{name} must be symmetric about the center")
            object.__setattr__(self, name, taps)

    @property
    def half(self) -> int:
        return (self.s - 1) // 2

    def weight3d(self, oi: int, oj: int, ok: int) -> float:
        """Product kernel weight at integer offset (oi, oj, ok)."""
        c = self.half
        return float(self.taps_x[oi + c] * self.taps_y[oj + c] * self.taps_z[ok + c])


def make_kernel(h: float, s: int, dims) -> KernelSpec:
    """Build per-axis taps: tap at offset o is gauss1d(o / (h * d_axis)).

    The argument is the normalized-coordinate distance between voxels o grid
    steps apart along that axis, so anisotropic dims give different taps per
    axis.
    """
    dims = check_dims(dims)
    if s < 1 or s % 2 == 0:
        raise ValueError(f"filter size must be odd and >= 1, got {s}")
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    offsets = np.arange(s, dtype=np.float64) - (s - 1) / 2.0
    dx, dy, dz = dims
    return KernelSpec(
        h=float(h),
        s=int(s),
        taps_x=gauss1d(offsets / (h * dx)),
        taps_y=gauss1d(offsets / (h * dy)),
        taps_z=gauss1d(offsets / (h * dz)),
    )


# --------------------------------------------------------------------------
# Separable path: three 1D passes over the (dz, dy, dx) array.
# Each output voxel accumulates its own taps in ascending-offset order, so
# results are deterministic and independent of the parallel schedule.
# --------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _pass_x(src, taps, out):
    dz, dy, dx = src.shape
    s = taps.shape[0]
    c = (s - 1) // 2
    for k in prange(dz):
        for j in range(dy):
            for i in range(dx):
                acc = 0.0
                for t in range(s):
                    ii = i + t - c
                    if 0 <= ii < dx:
                        acc += taps[t] * src[k, j, ii]
                out[k, j, i] = acc


@njit(cache=True, parallel=True)
def _pass_y(src, taps, out):
    dz, dy, dx = src.shape
    s = taps.shape[0]
    c = (s - 1) // 2
    for k in prange(dz):
        for j in range(dy):
            for i in range(dx):
                acc = 0.0
                for t in range(s):
                    jj = j + t - c
                    if 0 <= jj < dy:
                        acc += taps[t] * src[k, jj, i]
                out[k, j, i] = acc


@njit(cache=True, parallel=True)
def _pass_z(src, taps, out):
    dz, dy, dx = src.shape
    s = taps.shape[0]
    c = (s - 1) // 2
    for k in prange(dz):
        for j in range(dy):
            for i in range(dx):
                acc = 0.0
                for t in range(s):
                    kk = k + t - c
                    if 0 <= kk < dz:
                        acc += taps[t] * src[kk, j, i]
                out[k, j, i] = acc


def weighted_conv_raw(field: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Separable masked convolution on a raw (dz, dy, dx) array.

    Masking is the caller's responsibility: excluded voxels must already be
    zeroed in ``field``.  This is the workhorse the KEM updates call, since
    they convolve many derived fields under one mask.
    """
    a = np.ascontiguousarray(field, dtype=np.float64)
    b = np.empty_like(a)
    _pass_x(a, kernel.taps_x, b)
    a2 = np.empty_like(a)
    _pass_y(b, kernel.taps_y, a2)
    _pass_z(a2, kernel.taps_z, b)
    return b


def weighted_conv(numerator_field: Volume3D, kernel: KernelSpec, mask: SampleMask) -> Volume3D:
    """Kernel-weighted sum of the masked field over each voxel's s^3 window."""
    check_same_dims(numerator_field, mask, "mask")
    src = np.where(mask.included, numerator_field.data, 0.0)
    return Volume3D(numerator_field.dims, weighted_conv_raw(src, kernel))


# --------------------------------------------------------------------------
# Direct oracles
# --------------------------------------------------------------------------

@njit(cache=True)
def _direct_window(src, taps_x, taps_y, taps_z, out):
    dz, dy, dx = src.shape
    s = taps_x.shape[0]
    c = (s - 1) // 2
    for k in range(dz):
        for j in range(dy):
            for i in range(dx):
                acc = 0.0
                for tk in range(s):
                    kk = k + tk - c
                    if kk < 0 or kk >= dz:
                        continue
                    for tj in range(s):
                        jj = j + tj - c
                        if jj < 0 or jj >= dy:
                            continue
                        for ti in range(s):
                            ii = i + ti - c
                            if ii < 0 or ii >= dx:
                                continue
                            acc += taps_x[ti] * taps_y[tj] * taps_z[tk] * src[kk, jj, ii]
                out[k, j, i] = acc


def conv_direct_window(field: Volume3D, kernel: KernelSpec, mask: SampleMask) -> Volume3D:
    """Triple-loop s^3-window sum; the oracle the separable path must match."""
    check_same_dims(field, mask, "mask")
    src = np.where(mask.included, field.data, 0.0)
    out = np.empty_like(src)
    _direct_window(src, kernel.taps_x, kernel.taps_y, kernel.taps_z, out)
    return Volume3D(field.dims, out)


_REFERENCE_DIM_LIMIT = 16


def conv_direct_reference(field: Volume3D, h: float, mask: SampleMask) -> Volume3D:
    """Exact UNtruncated kernel sum over all included voxels, O(N^2).

    Guarded to tiny grids; exists purely as the analytic reference the
    truncated paths converge to as s grows.
    """
    check_same_dims(field, mask, "mask")
    dims = field.dims
    if max(dims) > _REFERENCE_DIM_LIMIT:
        raise ValueError(f"reference path allows dims <= {_REFERENCE_DIM_LIMIT}, got {dims}")
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    dx, dy, dz = dims
    gx = gauss1d((np.arange(dx)[:, None] - np.arange(dx)[None, :]) / (h * dx))
    gy = gauss1d((np.arange(dy)[:, None] - np.arange(dy)[None, :]) / (h * dy))
    gz = gauss1d((np.arange(dz)[:, None] - np.arange(dz)[None, :]) / (h * dz))
    src = np.where(mask.included, field.data, 0.0)
    out = np.einsum("ab,cd,ef,bdf->ace", gz, gy, gx, src, optimize=True)
    return Volume3D(dims, np.ascontiguousarray(out))
