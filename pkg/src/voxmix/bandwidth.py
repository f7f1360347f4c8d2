"""Bandwidth-constant selection: pilot schedules, CV grid search, and the
regression shortcut.

Both selectors score pilot bandwidths by squared prediction error on a
held-out voxel set.  CV picks the argmin over a 25-pilot grid.  REG fits the
asymptotic risk expansion

    SPE(C_h) ~ const + (C_h^4 * C1 / 4 + C_h^-3 * C2) * N^(-4/7)

to a 5-pilot curve by least squares and returns the closed-form minimizer
C_h = (3 * C2 / C1)^(1/7), falling back to CV when the estimated constants
are not positive.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from voxmix.kem import FitConfig, kem_fit, predict_response
from voxmix.kernel import make_kernel
from voxmix.metrics import prediction_error
from voxmix.volume import SampleMask, Volume3D, check_dims

__all__ = [
    "Pilot",
    "BandwidthPlan",
    "SpeCurve",
    "BandwidthSelection",
    "default_reg_schedule",
    "default_cv_schedule",
    "spe",
    "select_cv",
    "select_reg",
    "select_bandwidth",
    "filter_size_for",
]

PILOT_GRID_DENOM = 512.0
CV_MULTIPLIERS = (0.3, 0.4, 0.5, 0.6, 0.7)
_COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class Pilot:
    """One candidate bandwidth: constant, bandwidth, and filter size."""

    Ch: float
    h: float
    s: int

    def __post_init__(self):
        if not self.h > 0 or not self.Ch > 0:
            raise ValueError("bandwidth and constant must be positive")
        if self.s < 1 or self.s % 2 == 0:
            raise ValueError(f"filter size must be odd and >= 1, got {self.s}")


@dataclass(frozen=True, eq=False)
class BandwidthPlan:
    """Pilot list plus the sample size that ties C_h to h."""

    pilots: tuple
    N: int
    method: str

    def __post_init__(self):
        if self.method not in ("CV", "REG"):
            raise ValueError(f"unknown selection method {self.method!r}")
        if self.N < 1:
            raise ValueError("N must be positive")
        pilots = tuple(self.pilots)
        if not pilots:
            raise ValueError("plan has no pilots")
        for p in pilots:
            if abs(p.Ch - p.h * self.N ** (1.0 / 7.0)) > 1e-9 * p.Ch:
                raise ValueError(f"pilot violates Ch = h * N^(1/7): {p}")
        object.__setattr__(self, "pilots", pilots)

    @property
    def G(self) -> int:
        return len(self.pilots)


@dataclass(frozen=True, eq=False)
class SpeCurve:
    """Pilots paired with their measured squared prediction errors."""

    pilots: tuple
    spes: tuple

    def __post_init__(self):
        pilots = tuple(self.pilots)
        spes = tuple(float(v) for v in self.spes)
        if len(pilots) != len(spes):
            raise ValueError("pilot/SPE length mismatch")
        if not pilots:
            raise ValueError("empty curve")
        if any(v < 0 for v in spes):
            raise ValueError("SPE must be non-negative")
        object.__setattr__(self, "pilots", pilots)
        object.__setattr__(self, "spes", spes)

    def __len__(self) -> int:
        return len(self.pilots)


@dataclass(frozen=True, eq=False)
class BandwidthSelection:
    """Outcome of a selection run, serializable for the CLI."""

    h: float
    s: int
    Ch: float
    curve: SpeCurve
    method: str
    C1_hat: float | None = None
    C2_hat: float | None = None
    fell_back: bool = False

    def to_dict(self) -> dict:
        sel = {"Ch": self.Ch, "h": self.h, "s": self.s}
        if self.C1_hat is not None:
            sel["C1"] = self.C1_hat
            sel["C2"] = self.C2_hat
        if self.fell_back:
            sel["fell_back_to_cv"] = True
        return {
            "pilots": [
                {"Ch": p.Ch, "h": p.h, "s": p.s, "spe": v}
                for p, v in zip(self.curve.pilots, self.curve.spes)
            ],
            "selected": sel,
            "method": self.method,
        }


def _pilot(h: float, s: int, N: int) -> Pilot:
    return Pilot(Ch=h * N ** (1.0 / 7.0), h=h, s=s)


def default_reg_schedule(dims, N: int) -> BandwidthPlan:
    """Five pilots with s = 3,5,...,11 and h = s/512 regardless of dims."""
    check_dims(dims)
    pilots = [_pilot((2 * g + 1) / PILOT_GRID_DENOM, 2 * g + 1, N) for g in range(1, 6)]
    return BandwidthPlan(tuple(pilots), N, "REG")


def default_cv_schedule(dims, N: int) -> BandwidthPlan:
    """The 25-pilot CV grid: each base h scaled by 0.3..0.7, keeping base s."""
    check_dims(dims)
    pilots = []
    for g in range(1, 6):
        s = 2 * g + 1
        for mult in CV_MULTIPLIERS:
            pilots.append(_pilot(mult * s / PILOT_GRID_DENOM, s, N))
    return BandwidthPlan(tuple(pilots), N, "CV")


def spe(v: Volume3D, train_mask: SampleMask, test_mask: SampleMask, pilot: Pilot,
        M: int = 3, max_iter: int = 50, tol: float = 1e-4, sigma_floor: float = 1e-4,
        sigma_init: float = 0.05, sigma_numerator_mode: str = "standard",
        seed: int = 0) -> float:
    """Fit on the train mask with the pilot's kernel, score on the test mask."""
    cfg = FitConfig(
        M=M,
        kernel=make_kernel(pilot.h, pilot.s, v.dims),
        max_iter=max_iter,
        tol=tol,
        sigma_floor=sigma_floor,
        sigma_init=sigma_init,
        sigma_numerator_mode=sigma_numerator_mode,
        seed=seed,
    )
    result = kem_fit(v, train_mask, cfg)
    return prediction_error(v, predict_response(result.theta), test_mask)


def select_cv(curve: SpeCurve) -> Pilot:
    """Pilot with the lowest SPE; ties break toward the smaller constant."""
    best = None
    for p, v in zip(curve.pilots, curve.spes):
        if best is None or v < best[0] or (v == best[0] and p.Ch < best[1].Ch):
            best = (v, p)
    return best[1]


def select_reg(curve: SpeCurve, N: int):
    """Least-squares fit of the risk expansion; returns (Ch, C1_hat, C2_hat).

    With exactly two pilots the two-parameter model interpolates the curve;
    with more, the constant term is removed by centering and the two
    coefficients come from the normal equations.  Non-positive estimated
    constants trigger a CV fallback on the same curve with a warning; the
    (non-positive) estimates are still returned for inspection.
    """
    if len(curve) < 2:
        raise ValueError("regression selection needs at least 2 pilots")
    ch = np.array([p.Ch for p in curve.pilots], dtype=np.float64)
    y = np.array(curve.spes, dtype=np.float64)
    scale = float(N) ** (-4.0 / 7.0)
    X = np.column_stack([scale * ch**4 / 4.0, scale * ch**-3.0])
    if len(curve) == 2:
        D = X
        rhs = y
    else:
        D = X - X.mean(axis=0)
        rhs = y - y.mean()
    # the two columns live on wildly different scales (C^4 vs C^-3); equalize
    # them before forming the 2x2 system so the guard sees true collinearity
    norms = np.sqrt(np.square(D).sum(axis=0))
    if (norms == 0).any():
        raise ValueError("design matrix is numerically singular")
    Ds = D / norms
    if len(curve) == 2:
        A = Ds
        b = rhs
    else:
        A = Ds.T @ Ds
        b = Ds.T @ rhs
    if np.linalg.cond(A) > _COND_LIMIT:
        raise ValueError("design matrix is numerically singular")
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    c1 = (A[1, 1] * b[0] - A[0, 1] * b[1]) / det / norms[0]
    c2 = (A[0, 0] * b[1] - A[1, 0] * b[0]) / det / norms[1]
    if c1 <= 0 or c2 <= 0:
        warnings.warn(
            "estimated risk constants not positive; falling back to CV selection",
            RuntimeWarning,
            stacklevel=2,
        )
        return select_cv(curve).Ch, float(c1), float(c2)
    return float((3.0 * c2 / c1) ** (1.0 / 7.0)), float(c1), float(c2)


def filter_size_for(h: float, dims, lo: int = 3, hi: int = 11) -> int:
    """Smallest odd filter size covering h in voxels, clamped to [lo, hi].

    The continuous selected bandwidth needs a discrete truncation width; one
    kernel-bandwidth of support per axis keeps truncation mild while the
    clamp bounds cost.
    """
    check_dims(dims)
    s = max(int(math.ceil(h * max(dims))), 1)
    if s % 2 == 0:
        s += 1
    return min(max(s, lo), hi)


def select_bandwidth(v: Volume3D, train_mask: SampleMask, test_mask: SampleMask,
                     plan: BandwidthPlan, **fit_options) -> BandwidthSelection:
    """Score every pilot, then apply the plan's selection rule."""
    spes = [spe(v, train_mask, test_mask, p, **fit_options) for p in plan.pilots]
    curve = SpeCurve(plan.pilots, tuple(spes))
    if plan.method == "CV":
        winner = select_cv(curve)
        return BandwidthSelection(
            h=winner.h, s=winner.s, Ch=winner.Ch, curve=curve, method="CV"
        )
    ch, c1, c2 = select_reg(curve, plan.N)
    fell_back = c1 <= 0 or c2 <= 0
    h = ch * plan.N ** (-1.0 / 7.0)
    return BandwidthSelection(
        h=h,
        s=filter_size_for(h, v.dims),
        Ch=ch,
        curve=curve,
        method="REG",
        C1_hat=c1,
        C2_hat=c2,
        fell_back=fell_back,
    )
