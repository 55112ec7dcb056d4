"""Weighted log-log fit of weak errors against epsilon."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass
class RateFit:
    slope: float | None
    intercept: float | None
    r2: float | None
    slope_stderr: float | None
    slope_ci: tuple | None
    n_points: int
    conclusive: bool
    message: str = ""

    def as_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "slope_stderr": self.slope_stderr,
            "slope_ci": None if self.slope_ci is None else list(self.slope_ci),
            "n_points": self.n_points,
            "conclusive": self.conclusive,
            "message": self.message,
        }


def inconclusive(n: int, message: str) -> RateFit:
    return RateFit(None, None, None, None, None, n, False, message)


def fit_rate(points, level: float = 0.95) -> RateFit:
    """Fit ``log err = a + s log eps`` to (eps, err, stderr) triples.

    Points are weighted by the delta-method variance ``(stderr/err)^2`` of
    ``log err``.  The slope interval propagates those variances linearly and
    is widened by the Birge ratio when the residual scatter exceeds them.
    With all stderrs zero the fit is unweighted.
    """
    pts = [(float(e), float(r), float(s)) for e, r, s in points]
    usable = [p for p in pts if p[0] > 0 and p[1] > 0 and math.isfinite(p[1])]
    if len(usable) < 3:
        return inconclusive(len(usable), f"need at least 3 points with positive error, got {len(usable)}")
    eps, err, se = (np.array(c) for c in zip(*usable))
    x = np.log(eps)
    y = np.log(err)
    sig = se / err
    weighted = bool(np.all(sig > 0))
    w = 1.0 / sig**2 if weighted else np.ones_like(x)
    D = np.column_stack([np.ones_like(x), x])
    G = D.T @ (w[:, None] * D)
    cov = np.linalg.inv(G)
    intercept, slope = cov @ (D.T @ (w * y))
    resid = y - (intercept + slope * x)
    dof = len(x) - 2
    chi2 = float(np.sum(w * resid**2))
    ybar = float(np.sum(w * y) / np.sum(w))
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - chi2 / ss_tot if ss_tot > 0 else 1.0
    if weighted:
        birge = max(1.0, math.sqrt(chi2 / dof)) if dof > 0 else 1.0
        slope_se = math.sqrt(cov[1, 1]) * birge
    else:
        slope_se = math.sqrt(cov[1, 1] * chi2 / dof) if dof > 0 else 0.0
    z = stats.norm.ppf(0.5 + level / 2)
    ci = (float(slope - z * slope_se), float(slope + z * slope_se))
    return RateFit(float(slope), float(intercept), float(r2), float(slope_se), ci, len(x), True, "")
