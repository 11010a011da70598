"""Influence functions and sandwich variance for the second-stage coefficients.

Each subject's influence ``phi_i = phi1_i + phi2_i + phi3_i`` splits into

* ``phi1``: the martingale term of the weighted estimating equation;
* ``phi2``: the first-stage term. Perturbing ``gamma`` moves every
  ``Xhat_e``; linearising the estimating function in ``gamma - gamma_0 =
  (X'X)^{-1} X'e`` gives one summand per subject, proportional to its
  first-stage residual;
* ``phi3``: the Kaplan-Meier term. Only competing-cause subjects past their
  own event time carry a weight that depends on ``G``, through
  ``Yhat^2 = (G(t)/G(T_i))^2``; its derivative brings the factor 2.

The covariance of ``beta`` is ``S2n^{-1} (n^{-1} sum phi_i phi_i') S2n^{-1} / n``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .additive import WeightedRiskSet
from .errors import IdentifiabilityError, RiskSetError
from .first_stage import design_matrix


@dataclass(frozen=True, eq=False)
class InfluenceRecords:
    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray
    first_stage_jacobian: np.ndarray    # (p+1) x (p+2); zero for naive fits

    @property
    def phi(self):
        return self.phi1 + self.phi2 + self.phi3

    @property
    def n(self):
        return self.phi1.shape[0]


@dataclass(frozen=True, eq=False)
class VarianceComponents:
    omega: np.ndarray
    psi: np.ndarray
    sigma: np.ndarray
    meat: np.ndarray            # n^{-1} sum phi_i phi_i'
    covariance: np.ndarray
    n: int

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def scaled(self):
        """``Omega^{-1} (n^{-1} sum phi phi') Omega^{-1}``, the covariance of sqrt(n)(beta - beta0)."""
        return self.covariance * self.n


def _martingale_term(fit, rs):
    z, beta = fit.z, fit.beta
    dh = np.diff(fit.h0_star, prepend=0.0)
    lin = z @ beta
    b_delta = rs.row_sums(fit.delta)
    b_dh = rs.row_sums(dh)
    b_delta_x = rs.row_sums(fit.delta[:, None] * fit.xbar)
    b_dh_x = rs.row_sums(dh[:, None] * fit.xbar)
    compensator = z * (lin * b_delta + b_dh)[:, None] - (lin[:, None] * b_delta_x + b_dh_x)
    return compensator


def _event_term(fit, ipcw):
    phi = np.zeros_like(fit.z)
    events = np.flatnonzero(ipcw.event & (ipcw.time <= fit.tau))
    k = np.searchsorted(fit.grid, ipcw.time[events])
    phi[events] = fit.z[events] - fit.xbar[k]
    return phi


def _first_stage_term(fit, dataset, first, rs):
    n = fit.n
    X = design_matrix(dataset)
    a_zx = rs.column_sums(fit.z[:, :, None] * X[:, None, :])
    a_x = rs.column_sums(X)
    jac = np.tensordot(fit.delta, a_zx - fit.xbar[:, :, None] * a_x[:, None, :], axes=1) / n
    proj = jac @ (n * first.xtx_inv)
    phi2 = -fit.beta[0] * (X * first.residuals[:, None]) @ proj.T
    return phi2, jac


def _censoring_term(fit, ipcw):
    n, d = fit.z.shape
    G = ipcw.G
    grid, delta = fit.grid, fit.delta
    cens_k = np.flatnonzero(np.isin(grid, G.jump_times))
    if cens_k.shape[0] == 0:
        return np.zeros((n, d))

    dh = np.diff(fit.h0_star, prepend=0.0)
    G2 = G(grid) ** 2

    def suffix_after(values):
        # sum over k > m, for each m
        c = np.cumsum(values[::-1], axis=0)[::-1]
        return np.concatenate([c[1:], np.zeros((1,) + values.shape[1:])])

    s_delta = suffix_after(G2 * delta)[cens_k]
    s_dh = suffix_after(G2 * dh)[cens_k]
    s_delta_x = suffix_after((G2 * delta)[:, None] * fit.xbar)[cens_k]
    s_dh_x = suffix_after((G2 * dh)[:, None] * fit.xbar)[cens_k]

    comp = np.flatnonzero(ipcw.competing)
    comp = comp[np.argsort(ipcw.time[comp], kind="stable")]
    a = 1.0 / ipcw.G_own[comp] ** 2
    zc = fit.z[comp]
    lin = zc @ fit.beta

    def prefix_upto(values):
        c = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(values, axis=0)])
        return c[np.searchsorted(ipcw.time[comp], grid[cens_k], side="right")]

    p1 = prefix_upto((a * lin)[:, None] * zc)
    p2 = prefix_upto(a[:, None] * zc)
    p3 = prefix_upto(a * lin)
    p4 = prefix_upto(a)

    q = (2.0 / n) * (p1 * s_delta[:, None] + p2 * s_dh[:, None]
                     - p3[:, None] * s_delta_x - p4[:, None] * s_dh_x)

    u = grid[cens_k]
    at_risk = n - np.searchsorted(np.sort(ipcw.time), u, side="left")
    if np.any(at_risk == 0):
        raise RiskSetError("censoring risk set empty before tau")
    pi = at_risk / n
    jump_idx = np.searchsorted(G.jump_times, u)
    hazard = G.censor_counts[jump_idx] / G.risk_counts[jump_idx]
    ratio = q / pi[:, None]

    phi3 = np.zeros((n, d))
    cens = np.flatnonzero(ipcw.censored & (ipcw.time <= fit.tau))
    phi3[cens] += ratio[np.searchsorted(u, ipcw.time[cens])]
    compensated = np.concatenate([np.zeros((1, d)), np.cumsum(ratio * hazard[:, None], axis=0)])
    phi3 -= compensated[np.searchsorted(u, ipcw.time, side="right")]
    return phi3


def influence_functions(fit, dataset, ipcw, first=None):
    """Per-subject influence records at the fitted coefficients.

    ``first`` is required for IV fits and ignored for naive ones.
    """
    rs = WeightedRiskSet(ipcw, fit.grid)
    phi1 = _event_term(fit, ipcw) - _martingale_term(fit, rs)
    if fit.mode == "iv":
        if first is None:
            raise ValueError("IV fits need the first-stage fit for their influence functions")
        phi2, jac = _first_stage_term(fit, dataset, first, rs)
    else:
        phi2 = np.zeros_like(phi1)
        jac = np.zeros((phi1.shape[1], dataset.p + 2))
    phi3 = _censoring_term(fit, ipcw)
    return InfluenceRecords(phi1=phi1, phi2=phi2, phi3=phi3, first_stage_jacobian=jac)


def _psi(fit, ipcw):
    events = np.flatnonzero(ipcw.event & (ipcw.time <= fit.tau))
    k = np.searchsorted(fit.grid, ipcw.time[events])
    r = fit.z[events] - fit.xbar[k]
    return r.T @ r / fit.n


def sandwich_variance(records, fit, ipcw, first=None):
    n = fit.n
    phi = records.phi
    meat = phi.T @ phi / n
    try:
        bread = np.linalg.inv(fit.s2n)
    except np.linalg.LinAlgError as exc:
        raise IdentifiabilityError(f"S2n is singular: {exc}") from None
    cov = bread @ meat @ bread / n
    cov = (cov + cov.T) / 2

    psi = _psi(fit, ipcw)
    if fit.mode == "iv" and first is not None:
        jac = records.first_stage_jacobian
        sigma = first.sigma2_hat * fit.beta[0] ** 2 * jac @ (n * first.xtx_inv) @ jac.T
        sigma = (sigma + sigma.T) / 2
    else:
        sigma = np.zeros_like(psi)
    return VarianceComponents(omega=fit.s2n, psi=psi, sigma=sigma, meat=meat, covariance=cov, n=n)


@dataclass(frozen=True)
class CoefficientRow:
    name: str
    estimate: float
    se: float
    z: float
    p_value: float
    lower: float
    upper: float
    degenerate: bool


def wald_summary(fit, variance, level=0.95):
    """Normal-theory Wald table; a zero SE gives ``z = +-inf`` and a point CI."""
    crit = stats.norm.ppf(0.5 + level / 2)
    rows = []
    for name, est, se in zip(fit.names, fit.beta, variance.se):
        est, se = float(est), float(se)
        if se > 0:
            z = est / se
            p = float(2 * stats.norm.sf(abs(z)))
        else:
            z = float(np.copysign(np.inf, est)) if est != 0 else float("nan")
            p = 0.0 if est != 0 else float("nan")
        rows.append(CoefficientRow(name, est, se, z, p, est - crit * se, est + crit * se, se == 0))
    return rows
