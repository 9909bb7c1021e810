"""Two-sample comparison battery and regression scores."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special
from scipy import stats as sps

from .core import ValidationError


class DegenerateVarianceError(ValueError):
    pass


def _sample(x, min_n=1, name="sample"):
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size < min_n:
        raise ValidationError(f"{name} needs at least {min_n} values, got {a.size}")
    return a


def ks_test(a, b):
    """Two-sample Kolmogorov-Smirnov statistic with its asymptotic p-value.

    The statistic is the largest gap between the two empirical CDFs; the
    p-value uses the limiting Kolmogorov distribution at
    ``sqrt(n*m/(n+m)) * D``.
    """
    x, y = np.sort(_sample(a, name="a")), np.sort(_sample(b, name="b"))
    grid = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, grid, side="right") / x.size
    cdf_y = np.searchsorted(y, grid, side="right") / y.size
    d = float(np.max(np.abs(cdf_x - cdf_y)))
    en = math.sqrt(x.size * y.size / (x.size + y.size))
    p = float(special.kolmogorov(en * d)) if d > 0 else 1.0
    return d, min(max(p, 0.0), 1.0)


def _pooled_sd(x, y):
    nx, ny = x.size, y.size
    return math.sqrt(((nx - 1) * x.var(ddof=1) + (ny - 1) * y.var(ddof=1)) / (nx + ny - 2))


def t_test(a, b):
    """Student's two-sample t-test with pooled variance, two-sided p.

    The statistic is ``(mean(a) - mean(b)) / (s_p * sqrt(1/n_a + 1/n_b))``.
    Identical samples give ``t = 0, p = 1``.
    """
    x, y = _sample(a, 2, "a"), _sample(b, 2, "b")
    sp = _pooled_sd(x, y)
    diff = x.mean() - y.mean()
    if sp == 0:
        if diff == 0:
            raise DegenerateVarianceError("both samples have zero variance")
        raise DegenerateVarianceError("zero pooled variance with distinct means")
    t = diff / (sp * math.sqrt(1.0 / x.size + 1.0 / y.size))
    p = 2.0 * float(sps.t.sf(abs(t), x.size + y.size - 2))
    return float(t), min(p, 1.0)


EFFECT_BANDS = ((0.2, "negligible"), (0.5, "small"), (0.8, "medium"), (math.inf, "large"))


def effect_band(d: float) -> str:
    for upper, name in EFFECT_BANDS:
        if abs(d) < upper:
            return name
    return "large"


def cohens_d(a, b):
    """Absolute standardized mean difference and its conventional band."""
    x, y = _sample(a, 2, "a"), _sample(b, 2, "b")
    sp = _pooled_sd(x, y)
    diff = abs(x.mean() - y.mean())
    if sp == 0:
        raise DegenerateVarianceError("zero pooled standard deviation")
    d = diff / sp
    return float(d), effect_band(d)


def significance_marker(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


@dataclass
class StatsReport:
    ks_statistic: float
    ks_p: float
    t_statistic: float
    t_p: float
    cohens_d: float
    effect: str
    ks_marker: str
    t_marker: str

    def to_dict(self):
        return asdict(self)


def compare(a, b) -> StatsReport:
    """KS, t-test and Cohen's d for two samples of one descriptor."""
    ks, ks_p = ks_test(a, b)
    try:
        t, t_p = t_test(a, b)
    except DegenerateVarianceError:
        t, t_p = math.nan, math.nan
    try:
        d, band = cohens_d(a, b)
    except DegenerateVarianceError:
        d, band = math.inf, "large"
    return StatsReport(ks, ks_p, t, t_p, d, band, significance_marker(ks_p),
                       significance_marker(t_p) if t_p == t_p else "ns")


def _pair(targets, observed):
    t = np.asarray(targets, dtype=np.float64).ravel()
    o = np.asarray(observed, dtype=np.float64).ravel()
    if t.size != o.size or t.size < 2:
        raise ValidationError("targets and observed must have equal length >= 2")
    return t, o


def r_squared(targets, observed) -> float:
    """Coefficient of determination of ``observed`` as a prediction of ``targets``.

    ``1 - sum((observed - target)^2) / sum((target - mean(target))^2)``;
    a constant prediction equal to the mean target scores 0.
    """
    t, o = _pair(targets, observed)
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0:
        raise DegenerateVarianceError("targets have zero variance")
    return 1.0 - float(((o - t) ** 2).sum()) / ss_tot


def mae(targets, observed) -> float:
    t, o = _pair(targets, observed)
    return float(np.abs(o - t).mean())
