"""Covariate-specific cumulative incidence prediction with pointwise bands.

``Fhat_1(t | x) = 1 - exp(-Hmod(t) - t * beta' x)`` with ``x`` on the
centered scale. Its variance comes from the delta method on
``L(t) = -log(1 - F)``:

    K(s, t) = (1 - F(s)) (1 - F(t)) [ g(s ^ t) + a(s)' V a(t)
                                      + a(s)' Omega^-1 Gamma(t) + a(t)' Omega^-1 Gamma(s) ]

where ``V`` is the scaled covariance of ``sqrt(n)(beta - beta0)``. With the
default ``linearization="exact"`` the loading is ``a(t) = t x - int_0^t xbar``,
``Gamma`` uses event covariates centered at ``xbar`` and ``V`` is the
influence-function covariance. ``linearization="display"`` uses
``a(t) = t x``, the uncentered ``Gamma`` and ``V = Omega^-1 (Psi + Sigma) Omega^-1``.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .errors import DataError


class CifRangeWarning(UserWarning):
    """A predicted cumulative incidence fell outside [0, 1)."""


@dataclass(frozen=True, eq=False)
class CifCurve:
    times: np.ndarray
    values: np.ndarray
    se: np.ndarray
    x: np.ndarray               # covariate vector on the centered scale
    g_hat: np.ndarray
    gamma_hat: np.ndarray       # len(times) x (p+1)
    level: float = None
    lower: np.ndarray = None
    upper: np.ndarray = None

    def table(self):
        cols = [self.times, self.values, self.se]
        if self.lower is not None:
            cols += [self.lower, self.upper]
        return np.column_stack(cols)


def _grid_index(fit, t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise DataError("prediction times must be nonnegative", module="prediction")
    if np.any(t > fit.tau):
        raise DataError(f"prediction time {t.max():.6g} exceeds tau={fit.tau:.6g}; no extrapolation",
                        module="prediction")
    return t


def _step_at(fit, values, t):
    """Right-continuous cumulative value at ``t`` (0 before the first knot)."""
    idx = np.searchsorted(fit.grid, t, side="right")
    values = np.asarray(values)
    pad = np.zeros((1,) + values.shape[1:])
    return np.concatenate([pad, values])[idx]


def baseline_variance(fit):
    """``g`` on the fit grid: ``n * sum_{s <= t} dN(s) / S0(s)^2``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inc = np.where(fit.event_counts > 0, fit.event_counts / fit.s0 ** 2, 0.0)
    return fit.n * np.cumsum(inc)


def baseline_cross(fit, centered=True):
    """``Gamma`` on the fit grid (K x (p+1))."""
    num = fit.event_z - fit.event_counts[:, None] * fit.xbar if centered else fit.event_z
    with np.errstate(divide="ignore", invalid="ignore"):
        inc = np.where(fit.event_counts[:, None] > 0, num / fit.s0[:, None], 0.0)
    return np.cumsum(inc, axis=0)


def mean_drift(fit, t):
    """``int_0^t xbar(s) ds``; ``xbar`` is constant on each ``(g[k-1], g[k]]``."""
    cum = np.concatenate([np.zeros((1, fit.xbar.shape[1])),
                          np.cumsum(fit.delta[:, None] * fit.xbar, axis=0)])
    k = np.minimum(np.searchsorted(fit.grid, t, side="left"), fit.grid.shape[0] - 1)
    start = np.where(k > 0, fit.grid[k - 1], 0.0)
    return cum[k] + (t - start)[:, None] * fit.xbar[k]


def _loading(fit, x, t, linearization):
    a = np.outer(t, x)
    if linearization == "exact":
        a = a - mean_drift(fit, t)
    return a


def _scaled_covariance(variance, linearization):
    if linearization == "exact":
        return variance.scaled
    inv = np.linalg.inv(variance.omega)
    v = inv @ (variance.psi + variance.sigma) @ inv
    return (v + v.T) / 2


def _check_linearization(linearization):
    if linearization not in ("exact", "display"):
        raise ValueError(f"linearization must be 'exact' or 'display', got {linearization!r}")


def _resolve_x(fit, x_e, x_o, centered):
    x_o = np.atleast_1d(np.asarray(x_o if x_o is not None else [], dtype=float))
    if x_o.shape[0] != fit.beta.shape[0] - 1:
        raise DataError(f"expected {fit.beta.shape[0] - 1} covariate values, got {x_o.shape[0]}",
                        module="prediction")
    if centered:
        return np.concatenate([[float(x_e)], x_o])
    return np.concatenate([[float(x_e) - fit.offsets[1]], x_o - fit.offsets[2:]])


def predict_cif(fit, x_e, x_o, times, variance=None, *, centered=False, linearization="exact"):
    """Cumulative incidence of the cause of interest at ``times``.

    ``x_e`` and ``x_o`` are on the original data scale unless
    ``centered=True``. Pointwise standard errors are filled in when
    ``variance`` is given (otherwise they are NaN).
    """
    _check_linearization(linearization)
    t = _grid_index(fit, times)
    x = _resolve_x(fit, x_e, x_o, centered)
    total = _step_at(fit, fit.h0_mod, t) + t * (fit.beta @ x)
    values = 1.0 - np.exp(-total)
    bad = (values < 0) | (values >= 1) | ~np.isfinite(values)
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} predicted CIF value(s) outside [0, 1); "
                      "the covariate shift makes the cumulative hazard negative", CifRangeWarning,
                      stacklevel=2)
    g = _step_at(fit, baseline_variance(fit), t)
    gam = _step_at(fit, baseline_cross(fit, linearization == "exact"), t)
    if variance is None:
        se = np.full(t.shape, np.nan)
    else:
        kdiag = np.array([_k(fit, variance, x, ti, ti, linearization) for ti in t])
        se = np.sqrt(np.clip(kdiag, 0.0, None) / fit.n)
    return CifCurve(times=t, values=values, se=se, x=x, g_hat=g, gamma_hat=gam)


def _k(fit, variance, x, s, t, linearization):
    s_arr, t_arr = np.array([s], dtype=float), np.array([t], dtype=float)
    f_s = 1.0 - np.exp(-(_step_at(fit, fit.h0_mod, s_arr) + s * (fit.beta @ x)))[0]
    f_t = 1.0 - np.exp(-(_step_at(fit, fit.h0_mod, t_arr) + t * (fit.beta @ x)))[0]
    g = _step_at(fit, baseline_variance(fit), np.array([min(s, t)]))[0]
    gam = _step_at(fit, baseline_cross(fit, linearization == "exact"), np.array([s, t]))
    a = _loading(fit, x, np.array([s, t]), linearization)
    v = _scaled_covariance(variance, linearization)
    omega_inv = np.linalg.inv(variance.omega)
    bracket = g + a[0] @ v @ a[1] + a[0] @ omega_inv @ gam[1] + a[1] @ omega_inv @ gam[0]
    return float((1 - f_s) * (1 - f_t) * bracket)


def cif_covariance(fit, variance, x_e, x_o, s, t, *, centered=False, linearization="exact"):
    """``K(s, t)``, the covariance of ``sqrt(n)(Fhat(s) - F(s))`` and ``sqrt(n)(Fhat(t) - F(t))``."""
    _check_linearization(linearization)
    _grid_index(fit, [s, t])
    x = _resolve_x(fit, x_e, x_o, centered)
    return _k(fit, variance, x, float(s), float(t), linearization)


def cif_bands(curve, level=0.95):
    """Pointwise intervals built on ``log(-log(1 - F))`` and mapped back.

    Where the cumulative hazard ``-log(1 - F)`` is not positive the log
    transform is undefined; those points get a symmetric interval on the
    cumulative hazard scale instead (and a zero-width one when SE is 0).
    """
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    z = stats.norm.ppf(0.5 + level / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        cumhaz = -np.log1p(-curve.values)
        se_h = curve.se / (1.0 - curve.values)
        positive = cumhaz > 0
        spread = np.where(positive, np.exp(z * se_h / np.where(positive, cumhaz, 1.0)), 1.0)
        lo_h = np.where(positive, cumhaz / spread, cumhaz - z * se_h)
        hi_h = np.where(positive, cumhaz * spread, cumhaz + z * se_h)
    lower = -np.expm1(-lo_h)
    upper = -np.expm1(-hi_h)
    zero = (curve.se == 0)
    lower = np.where(zero, curve.values, lower)
    upper = np.where(zero, curve.values, upper)
    return replace(curve, level=level, lower=lower, upper=upper)
