"""Evaluation measures: MAE, Pearson correlation, quartiles, paired t-test."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats


class ConstantInputError(ValueError):
    """Correlation is undefined because one input has zero variance."""


def mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mae: shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"pearson: length mismatch {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("pearson: need at least two observations")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(np.dot(da, da)))
    sb = math.sqrt(float(np.dot(db, db)))
    if sa == 0.0 or sb == 0.0:
        raise ConstantInputError("pearson: constant input")
    r = float(np.dot(da, db)) / (sa * sb)
    return max(-1.0, min(1.0, r))


def avg_correlation(pred, target) -> float:
    """Mean of per-column Pearson correlations; constant columns are skipped."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"avg_correlation: need equal (B, Y) arrays, got {pred.shape} and {target.shape}")
    if pred.shape[0] < 2:
        raise ValueError("avg_correlation: need at least two rows")
    values = []
    for j in range(pred.shape[1]):
        try:
            values.append(pearson(pred[:, j], target[:, j]))
        except ConstantInputError:
            warnings.warn(f"avg_correlation: column {j} is constant; excluded", RuntimeWarning)
    if not values:
        return float("nan")
    return float(np.mean(values))


def quantile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation quantile (Hyndman-Fan type 7)."""
    xs = np.sort(np.asarray(values, dtype=np.float64))
    if xs.size == 0:
        raise ValueError("quantile of empty sequence")
    h = (xs.size - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, xs.size - 1)
    return float(xs[lo] + (h - lo) * (xs[hi] - xs[lo]))


@dataclass
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list[float]
    n: int


def box_stats(values: Sequence[float]) -> BoxStats:
    """Median, quartiles and 1.5 IQR whiskers (Tukey) of ``values``."""
    xs = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = quantile(xs, 0.25), quantile(xs, 0.5), quantile(xs, 0.75)
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = xs[(xs >= lo_fence) & (xs <= hi_fence)]
    outliers = [float(v) for v in xs if v < lo_fence or v > hi_fence]
    return BoxStats(med, q1, q3, float(inside.min()), float(inside.max()), outliers, int(xs.size))


@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    threshold: float
    significant: bool
    degenerate: bool = False
    mean: float = 0.0
    sd: float = 0.0


def paired_ttest(d: Sequence[float], alpha: float = 0.05, n_tests: int = 1) -> TTestResult:
    """Two-sided one-sample t-test of paired differences ``d`` against zero.

    Significance uses the Bonferroni threshold ``alpha / n_tests``.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ValueError("paired_ttest: need at least two differences")
    threshold = alpha / n_tests
    m = float(d.mean())
    sd = float(np.sqrt(np.sum((d - m) ** 2) / (n - 1)))
    if sd == 0.0 or np.all(d == d[0]):
        # identical differences; rounding in the mean can leave sd at ~1e-17
        return TTestResult(float("nan"), n - 1, float("nan"), threshold, False, True, float(d[0]), 0.0)
    t = m / (sd / math.sqrt(n))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 1)))
    return TTestResult(t, n - 1, p, threshold, p < threshold, False, m, sd)
