"""Least-squares line fits shared by the rate estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r2: float
    npoints: int

    @property
    def degenerate(self) -> bool:
        return self.npoints < 3 or not np.isfinite(self.slope)


def linfit(x, y) -> LineFit:
    """Ordinary least squares y ~ slope * x + intercept."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    n = len(x)
    if n < 2 or np.ptp(x) == 0:
        return LineFit(float("nan"), float("nan"), 0.0, n)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, min(1.0, 1.0 - ss_res / ss_tot))
    return LineFit(float(slope), float(intercept), r2, n)


def loglinear_fit(n, values, floor: float = 1e-12) -> LineFit:
    """Fit ln|values| against n, keeping only |values| > floor."""
    n = np.asarray(n, dtype=float)
    v = np.abs(np.asarray(values, dtype=float))
    keep = v > floor
    return linfit(n[keep], np.log(v[keep]))


def loglog_fit(x, values, floor: float = 1e-12) -> LineFit:
    x = np.asarray(x, dtype=float)
    v = np.abs(np.asarray(values, dtype=float))
    keep = (v > floor) & (x > 0)
    return linfit(np.log(x[keep]), np.log(v[keep]))
