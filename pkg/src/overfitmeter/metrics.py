"""Scalar overfitting metrics computed from accuracy-vs-perturbation curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

CURVE_KINDS = ("pmv", "ptv", "fgsm", "spatial", "gaussian", "corruption")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class AccuracyCurve:
    levels: np.ndarray
    accuracies: np.ndarray
    kind: str = "pmv"
    model_id: str = ""
    seed: int = 0

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        accs = np.asarray(self.accuracies, dtype=np.float64)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "accuracies", accs)
        if levels.ndim != 1 or levels.shape != accs.shape:
            raise MetricError(f"levels {levels.shape} and accuracies {accs.shape} must be equal-length 1-D")
        if len(levels) < 2:
            raise MetricError("a curve needs at least two points")
        if np.any(np.diff(levels) <= 0):
            raise MetricError("levels must be strictly increasing")

    def __len__(self) -> int:
        return len(self.levels)

    def normalized(self) -> "AccuracyCurve":
        """Accuracies divided by the unperturbed accuracy (left as-is if that is 0)."""
        base = self.accuracies[0]
        accs = self.accuracies / base if base > 0 else self.accuracies.copy()
        return AccuracyCurve(self.levels, accs, self.kind, self.model_id, self.seed)


def _xy(curve):
    if isinstance(curve, AccuracyCurve):
        return curve.levels, curve.accuracies
    levels, accs = curve
    return np.asarray(levels, dtype=np.float64), np.asarray(accs, dtype=np.float64)


def slope_metric(curve) -> float:
    """Magnitude of the ordinary least-squares slope through every point."""
    r, acc = _xy(curve)
    dr = r - r.mean()
    denom = float(np.dot(dr, dr))
    if denom == 0.0:
        raise MetricError("slope undefined: all perturbation levels are equal")
    return abs(float(np.dot(dr, acc - acc.mean())) / denom)


def ptv_slope(curve) -> float:
    """Same fit as :func:`slope_metric`; for clean-set curves large means overfit."""
    return slope_metric(curve)


def max_decrease(curve) -> float:
    """Largest absolute change between consecutive curve points."""
    _, acc = _xy(curve)
    if len(acc) < 2:
        raise MetricError("max_decrease needs at least two points")
    return float(np.max(np.abs(np.diff(acc))))


def anchored_slope(curve) -> float:
    """Least-squares slope of a line forced through the first point."""
    r, acc = _xy(curve)
    dr = r[1:] - r[0]
    denom = float(np.dot(dr, dr))
    if denom == 0.0:
        raise MetricError("anchored fit undefined: all perturbation levels are equal")
    return float(np.dot(dr, acc[1:] - acc[0])) / denom


def sse_metric(curve) -> float:
    """Residual sum of squares of points 1..p about the best line anchored at point 0.

    The line is ``acc[0] + k * (r - r[0])``; with ``r[0] = 0`` this is the
    familiar ``Acc(S_0) + k * r``.
    """
    r, acc = _xy(curve)
    k = anchored_slope((r, acc))
    resid = acc[1:] - (acc[0] + k * (r[1:] - r[0]))
    return float(np.dot(resid, resid))


def adversarial_error_rate(model, perturbed_set) -> float:
    """Unit-weight adversarial error rate: share of perturbed inputs misclassified.

    ``perturbed_set`` must carry the original labels.
    """
    from .nn import predict

    if len(perturbed_set) == 0:
        raise MetricError("adversarial error rate of an empty set")
    data = perturbed_set.to_range(model.input_range)
    return float(np.mean(predict(model, data.images) != data.labels))


def generalization_gap(acc_s: float, acc_v: float) -> float:
    return float(acc_s) - float(acc_v)


# column name -> (method, metric function); order matches the text table columns
METRIC_COLUMNS = {
    "pmv_slope": ("pmv", slope_metric),
    "ptv_slope": ("ptv", ptv_slope),
    "spatial_max_decrease": ("spatial", max_decrease),
    "spatial_sse": ("spatial", sse_metric),
    "fgsm_max_decrease": ("fgsm", max_decrease),
    "fgsm_sse": ("fgsm", sse_metric),
    "gaussian_max_decrease": ("gaussian", max_decrease),
    "gaussian_sse": ("gaussian", sse_metric),
    "corruption_max_decrease": ("corruption", max_decrease),
    "corruption_sse": ("corruption", sse_metric),
}


@dataclass
class OverfitReport:
    model_id: str
    train_accuracy: Optional[float] = None
    val_accuracy: Optional[float] = None
    curves: Dict[str, AccuracyCurve] = field(default_factory=dict)
    scalars: Dict[str, float] = field(default_factory=dict)

    @property
    def gap(self) -> Optional[float]:
        if self.train_accuracy is None or self.val_accuracy is None:
            return None
        return generalization_gap(self.train_accuracy, self.val_accuracy)

    def compute(self) -> "OverfitReport":
        """Fill ``scalars`` from whichever curves are present."""
        for column, (method, fn) in METRIC_COLUMNS.items():
            if method in self.curves:
                self.scalars[column] = fn(self.curves[method])
        fgsm = self.curves.get("fgsm")
        if fgsm is not None:
            self.scalars["fgsm_error_rate"] = 1.0 - float(fgsm.accuracies[-1])
        return self


def median_report(reports: Sequence[OverfitReport]) -> OverfitReport:
    """Per-scalar median over replicate (seed) reports of one model."""
    if not reports:
        raise MetricError("no reports to aggregate")
    model_ids = {r.model_id for r in reports}
    if len(model_ids) != 1:
        raise MetricError(f"reports mix models {sorted(model_ids)}")
    out = OverfitReport(reports[0].model_id)
    for attr in ("train_accuracy", "val_accuracy"):
        vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
        if vals:
            setattr(out, attr, float(np.median(vals)))
    keys = sorted({k for r in reports for k in r.scalars})
    for k in keys:
        vals = [r.scalars[k] for r in reports if k in r.scalars and math.isfinite(r.scalars[k])]
        if vals:
            out.scalars[k] = float(np.median(vals))
    return out
