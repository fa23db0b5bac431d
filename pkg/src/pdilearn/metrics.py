"""Interval-accuracy and agreement metrics for fitted dose intervals.

Agreement counts compare the range indicator ``r`` with whether the observed
dose lies inside the predicted interval.  The labelling follows the study's
convention: a favourable outcome with the dose *outside* the interval is a
false positive, an unfavourable outcome with the dose *inside* a false
negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyContingency, EmptyInput, LengthMismatch, OracleUndefined

UNDEFINED = None  # marker for metrics with a zero denominator


@dataclass(frozen=True)
class Contingency:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "Contingency") -> "Contingency":
        return Contingency(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: Optional[float]
    f1: Optional[float]
    mcc: Optional[float]
    recall: Optional[float]
    precision: Optional[float]
    kappa: Optional[float]

    def as_dict(self) -> dict:
        return {"Accuracy": self.accuracy, "F1 Score": self.f1, "MCC": self.mcc,
                "Recall": self.recall, "Precision": self.precision, "Cohen's kappa": self.kappa}


def contingency(ell, u, a, r) -> Contingency:
    """Counts over rows with bounds ``(ell, u)``, doses ``a`` and indicators ``r``."""
    ell, u, a, r = (np.asarray(v).reshape(-1) for v in (ell, u, a, r))
    if not (ell.size == u.size == a.size == r.size):
        raise LengthMismatch(f"lengths {ell.size}, {u.size}, {a.size}, {r.size}")
    inside = (ell <= a) & (a <= u)
    good = r.astype(bool)
    return Contingency(
        tp=int(np.sum(good & inside)),
        tn=int(np.sum(~good & ~inside)),
        fp=int(np.sum(good & ~inside)),
        fn=int(np.sum(~good & inside)),
    )


def _ratio(num, den):
    return UNDEFINED if den == 0 else num / den


def classification_metrics(c: Contingency) -> MetricsReport:
    if c.total == 0:
        raise EmptyContingency("no rows were counted")
    tp, tn, fp, fn = (float(v) for v in (c.tp, c.tn, c.fp, c.fn))
    mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    kappa_den = (tp + fp) * (fp + tn) + (tp + fn) * (fn + tn)
    return MetricsReport(
        accuracy=(tp + tn) / c.total,
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        mcc=UNDEFINED if mcc_den == 0 else (tp * tn - fp * fn) / math.sqrt(mcc_den),
        recall=_ratio(tp, tp + fn),
        precision=_ratio(tp, tp + fp),
        kappa=_ratio(2 * (tp * tn - fn * fp), kappa_den),
    )


def interval_errors(ell, u, ell_star, u_star):
    """``(MAE, MSE)`` where each row contributes the error of both bounds."""
    ell, u, ell_star, u_star = (np.asarray(v, dtype=float).reshape(-1) for v in (ell, u, ell_star, u_star))
    if not (ell.size == u.size == ell_star.size == u_star.size):
        raise LengthMismatch("estimate and oracle lengths differ")
    if ell.size == 0:
        raise EmptyInput("no rows")
    if not (np.all(np.isfinite(ell_star)) and np.all(np.isfinite(u_star))):
        raise OracleUndefined("oracle bound missing for some rows")
    el = ell - ell_star
    eu = u - u_star
    return float(np.mean(np.abs(el) + np.abs(eu))), float(np.mean(el * el + eu * eu))


def invalid_proportion(ell, u, flagged=None) -> float:
    """Share of rows with ``ell > u`` or a bound outside ``[0, 1]`` (plus rows in ``flagged``)."""
    ell = np.asarray(ell, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if ell.size == 0:
        raise EmptyInput("no rows")
    if ell.size != u.size:
        raise LengthMismatch("bound lengths differ")
    bad = (ell > u) | (ell < 0.0) | (u > 1.0)
    if flagged is not None:
        bad = bad | np.asarray(flagged, dtype=bool).reshape(-1)
    return float(np.mean(bad))


def format_metric(v: Optional[float], digits: int = 3) -> str:
    return "-" if v is None else f"{v:.{digits}f}"
