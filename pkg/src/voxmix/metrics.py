"""Evaluation quantities: parameter-field RMSE, prediction SPE, label accuracy.

Class alignment convention: estimated and true component indices are matched
by the rank of each component's spatial-mean mu, ascending.  Every method in
the package orders components the same way, so this reduces to the identity
in the common case while staying robust to index flips.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from voxmix.volume import LabelVolume, ParameterField, SampleMask, Volume3D, check_same_dims

__all__ = [
    "EvalReport",
    "class_order",
    "align_labels",
    "rmse_field",
    "accuracy",
    "prediction_error",
    "spe_report",
    "append_report",
    "read_reports",
]

REPORT_COLUMNS = ("method", "r", "Ch", "rmse_pi", "rmse_mu", "rmse_sigma", "spe",
                  "accuracy", "seconds")


@dataclass(frozen=True, eq=False)
class EvalReport:
    """One method's scores on one phantom instance."""

    method: str
    r: float
    Ch: float | None
    rmse_pi: float
    rmse_mu: float
    rmse_sigma: float
    spe: float
    accuracy: float
    seconds: float

    def __post_init__(self):
        for name in ("rmse_pi", "rmse_mu", "rmse_sigma", "spe", "seconds"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy}")

    def row(self) -> list:
        # bandwidth-free methods leave the Ch column blank
        return ["" if (c == "Ch" and self.Ch is None) else getattr(self, c)
                for c in REPORT_COLUMNS]


def class_order(theta: ParameterField) -> np.ndarray:
    """Component indices sorted by ascending spatial-mean mu."""
    means = [float(theta.mu[m].mean()) for m in range(theta.n_components)]
    return np.argsort(means, kind="stable")


def rmse_field(estimate: ParameterField, truth: ParameterField, which: str) -> float:
    """Root mean square error of one field family after class alignment.

    sqrt( (1 / (|V| * M)) * sum over voxels and aligned classes of the
    squared difference ).
    """
    if which not in ("pi", "mu", "sigma"):
        raise ValueError(f"unknown field family {which!r}")
    check_same_dims(estimate, truth, "truth")
    if estimate.n_components != truth.n_components:
        raise ValueError(
            f"component count mismatch: {estimate.n_components} vs {truth.n_components}"
        )
    a = getattr(estimate, which)[class_order(estimate)]
    b = getattr(truth, which)[class_order(truth)]
    return float(math.sqrt(np.mean(np.square(a - b))))


def align_labels(labels: LabelVolume, theta: ParameterField) -> LabelVolume:
    """Relabel classes by their ascending-mu rank under theta."""
    if labels.n_classes != theta.n_components:
        raise ValueError(
            f"class count mismatch: {labels.n_classes} vs {theta.n_components}"
        )
    order = class_order(theta)
    rank = np.empty(theta.n_components, dtype=np.int64)
    rank[order] = np.arange(theta.n_components)
    lut = np.zeros(theta.n_components + 1, dtype=np.uint8)
    lut[1:] = rank + 1
    return LabelVolume(labels.dims, lut[labels.labels], labels.n_classes)


def accuracy(pred: LabelVolume, truth: LabelVolume, mask: SampleMask,
             pred_theta: ParameterField | None = None,
             truth_theta: ParameterField | None = None) -> float:
    """Fraction of masked voxels whose labels agree after class alignment.

    When the optional parameter fields are given, each side's alphabet is
    first relabeled by ascending-mu rank; otherwise the alphabets are assumed
    already aligned.
    """
    check_same_dims(pred, truth, "truth")
    check_same_dims(pred, mask, "mask")
    if mask.n_included == 0:
        raise ValueError("empty mask")
    p = align_labels(pred, pred_theta).labels if pred_theta is not None else pred.labels
    t = align_labels(truth, truth_theta).labels if truth_theta is not None else truth.labels
    return float((p[mask.included] == t[mask.included]).mean())


def prediction_error(v: Volume3D, prediction, test_mask: SampleMask) -> float:
    """Mean squared prediction error over the test voxels.

    ``prediction`` is either a Volume3D of per-voxel predictions or a scalar
    (the bandwidth-independent baseline prediction).
    """
    check_same_dims(v, test_mask, "test mask")
    if test_mask.n_included == 0:
        raise ValueError("empty test set")
    y = v.data[test_mask.included]
    if isinstance(prediction, Volume3D):
        check_same_dims(v, prediction, "prediction")
        yhat = prediction.data[test_mask.included]
    else:
        yhat = float(prediction)
    return float(np.mean(np.square(y - yhat)))


def spe_report(v: Volume3D, prediction, test_mask: SampleMask) -> float:
    """Squared prediction error; alias of prediction_error for report code."""
    return prediction_error(v, prediction, test_mask)


def append_report(path, report: EvalReport) -> None:
    """Append one CSV row, writing the header when the file is new."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fresh = not p.exists() or p.stat().st_size == 0
    with open(p, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(REPORT_COLUMNS)
        writer.writerow(report.row())


def read_reports(path) -> list[EvalReport]:
    """Load previously appended report rows."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                EvalReport(
                    method=row["method"],
                    r=float(row["r"]),
                    Ch=float(row["Ch"]) if row["Ch"] != "" else None,
                    rmse_pi=float(row["rmse_pi"]),
                    rmse_mu=float(row["rmse_mu"]),
                    rmse_sigma=float(row["rmse_sigma"]),
                    spe=float(row["spe"]),
                    accuracy=float(row["accuracy"]),
                    seconds=float(row["seconds"]),
                )
            )
    return out
