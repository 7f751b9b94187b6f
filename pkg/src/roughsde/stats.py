"""Log-log regressions for convergence and scaling exponents."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as _st

#: scale count needed before a fitted slope may certify anything
MIN_SCALES = 4


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    n_scales: int
    halfwidth: float
    stderr: float

    @property
    def certifiable(self) -> bool:
        return self.n_scales >= MIN_SCALES

    def verdict(self, threshold: float, r2_min: float = 0.9, above: bool = True) -> str:
        """``pass`` / ``fail`` against ``threshold``, or ``inconclusive`` on weak fits."""
        if not self.certifiable or not np.isfinite(self.slope) or self.r2 < r2_min:
            return "inconclusive"
        ok = self.slope >= threshold if above else self.slope <= threshold
        return "pass" if ok else "fail"

    def as_dict(self) -> dict:
        return asdict(self)


def regression_slope(points, level: float = 0.95) -> SlopeFit:
    """Least-squares line through ``(x, y)`` points, usually ``(log h, log error)``.

    The half-width is the two-sided Student-t confidence interval at ``level``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite point in regression")
    if np.ptp(x) == 0:
        raise ValueError("coincident abscissae")
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    sst = np.sum((y - ym) ** 2)
    sse = float(np.sum(resid ** 2))
    r2 = 1.0 if sst == 0 else float(1.0 - sse / sst)
    if n > 2:
        se = float(np.sqrt(sse / (n - 2) / sxx))
        half = float(_st.t.ppf(0.5 + level / 2, n - 2) * se)
    else:
        se, half = float("nan"), float("nan")
    return SlopeFit(slope, intercept, r2, int(n), half, se)


def loglog_fit(h, err, level: float = 0.95) -> SlopeFit:
    """Slope of ``log err`` against ``log h``; zero errors are dropped."""
    h = np.asarray(h, dtype=np.float64)
    err = np.asarray(err, dtype=np.float64)
    keep = (err > 0) & np.isfinite(err)
    if keep.sum() < 2:
        return SlopeFit(float("nan"), float("nan"), float("nan"), int(keep.sum()), float("nan"),
                        float("nan"))
    return regression_slope(np.column_stack([np.log(h[keep]), np.log(err[keep])]), level)
