"""Correlation/error criteria and the five-parameter logistic mapping."""

from __future__ import annotations

import numpy as np
from scipy import optimize, special, stats

from .errors import FitError, NumericalError


class UndefinedCorrelation(NumericalError):
    code = "undefined-correlation"


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two samples")
    return x, y


def plcc(x, y) -> float:
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    den = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    if den == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant vector")
    return float(np.clip(np.sum(dx * dy) / den, -1.0, 1.0))


def srcc(x, y) -> float:
    """Spearman correlation; ties receive the mean of their rank range."""
    x, y = _pair(x, y)
    return plcc(stats.rankdata(x, method="average"), stats.rankdata(y, method="average"))


def rmse(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.size} vs {y.size}")
    return float(np.sqrt(np.mean((x - y) ** 2)))


def logistic5(x, p) -> np.ndarray:
    """rho1 * (1/2 - 1/(1 + exp(rho2 (x - rho3)))) + rho4 x + rho5."""
    x = np.asarray(x, dtype=np.float64)
    r1, r2, r3, r4, r5 = p
    # 1/(1+e^t) == expit(-t), stable for large |t|
    return r1 * (0.5 - special.expit(-r2 * (x - r3))) + r4 * x + r5


def _jacobian(p, x, _y):
    r1, r2, r3, _, _ = p
    t = r2 * (x - r3)
    s = special.expit(-t)          # 1/(1+e^t)
    ds_dt = -s * (1.0 - s)
    j = np.empty((x.size, 5))
    j[:, 0] = 0.5 - s
    j[:, 1] = -r1 * ds_dt * (x - r3)
    j[:, 2] = r1 * ds_dt * r2
    j[:, 3] = x
    j[:, 4] = 1.0
    return j


def logistic_fit(x, y, n_starts: int = 5, seed: int = 0, tol: float = 1e-15):
    """Least-squares fit of the five-parameter logistic; returns rho as a numpy array.

    Levenberg-Marquardt from the standard initialisation plus up to
    ``n_starts - 1`` perturbed restarts and the pure linear fit; the lowest
    residual wins.
    """
    x, y = _pair(x, y)
    if x.size < 5:
        raise ValueError("need at least five points for a five-parameter fit")
    sx = x.std()
    if sx == 0.0:
        raise FitError("constant predictor", params=np.array([0, 0, 0, 0, y.mean()]))
    p0 = np.array([y.max() - y.min(), 1.0 / sx, x.mean(), 0.0, y.mean()])
    slope, intercept = np.polyfit(x, y, 1)
    starts = [p0, np.array([0.0, 1.0 / sx, x.mean(), slope, intercept])]
    rng = np.random.default_rng(seed)
    for _ in range(max(0, n_starts - 1)):
        jitter = p0 * rng.uniform(0.5, 1.5, size=5) + rng.normal(0, 0.1 * sx, size=5) * np.array([0, 0, 1, 0, 0])
        starts.append(jitter)

    def resid(p, xx, yy):
        return logistic5(xx, p) - yy

    best, best_cost, converged = None, np.inf, False
    for start in starts:
        try:
            res = optimize.least_squares(resid, start, jac=_jacobian, args=(x, y), method="lm",
                                         xtol=tol, ftol=tol, gtol=tol, max_nfev=20000)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(res.x)):
            continue
        cost = float(np.sum(res.fun ** 2))
        if cost < best_cost:
            best, best_cost = res.x, cost
        converged |= bool(res.success)
    if best is None or not converged:
        raise FitError("logistic fit did not converge", params=best,
                       rmse=None if best is None else float(np.sqrt(best_cost / x.size)))
    return best
