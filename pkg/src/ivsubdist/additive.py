"""Second-stage weighted estimating equations for the additive
subdistribution hazard model.

All time integrals are exact sums: every integrand is a step function that
is constant on the intervals ``(g[k-1], g[k]]`` of the merged grid of
observed times (``g[-1] = 0``), so ``int f dt = sum_k f(g[k]) * delta[k]``.
Weights are unit (``w_i(t) = 1``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, IdentifiabilityError, RiskSetError
from .first_stage import design_matrix

COND_LIMIT = 1e12
RISK_SET_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function, zero before the first knot."""

    knots: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        idx = np.searchsorted(self.knots, t, side="right")
        return np.concatenate([[0.0], self.values])[idx]


class WeightedRiskSet:
    """Sums over subjects weighted by ``Yhat_i(t)^2`` on a time grid.

    ``Yhat_i(g_k)^2`` is 1 while ``g_k <= T*_i``; afterwards it is 0, except
    for competing-cause subjects, for whom it is ``(G(g_k) / G(T_i))^2``.
    Both directions of summation (over subjects for each grid time, over
    grid times for each subject) therefore reduce to cumulative sums.
    """

    def __init__(self, ipcw, grid):
        time = ipcw.time
        self.n = time.shape[0]
        self.grid = grid
        self.order = np.argsort(time, kind="stable")
        self.start = np.searchsorted(time[self.order], grid, side="left")
        comp = np.flatnonzero(ipcw.competing)
        self.comp = comp[np.argsort(time[comp], kind="stable")]
        self.comp_scale = 1.0 / ipcw.G_own[self.comp] ** 2
        self.comp_count = np.searchsorted(time[self.comp], grid, side="left")
        self.G2 = ipcw.G(grid) ** 2
        # number of grid points at or before each subject's own time
        self.own_count = np.searchsorted(grid, time, side="right")
        self.is_comp = ipcw.competing
        self.own_scale = np.where(ipcw.competing, 1.0 / np.where(ipcw.G_own > 0, ipcw.G_own, 1.0) ** 2, 0.0)

    def column_sums(self, f):
        """``sum_i f_i Yhat_i(g_k)^2`` for each k; ``f`` has leading axis n."""
        f = np.asarray(f, dtype=float)
        fs = f[self.order]
        tail = np.concatenate([np.cumsum(fs[::-1], axis=0)[::-1], np.zeros((1,) + f.shape[1:])])
        fc = f[self.comp] * self.comp_scale.reshape((-1,) + (1,) * (f.ndim - 1))
        head = np.concatenate([np.zeros((1,) + f.shape[1:]), np.cumsum(fc, axis=0)])
        G2 = self.G2.reshape((-1,) + (1,) * (f.ndim - 1))
        return tail[self.start] + G2 * head[self.comp_count]

    def row_sums(self, h):
        """``sum_k h_k Yhat_i(g_k)^2`` for each subject; ``h`` has leading axis K."""
        h = np.asarray(h, dtype=float)
        zeros = np.zeros((1,) + h.shape[1:])
        before = np.concatenate([zeros, np.cumsum(h, axis=0)])
        G2 = self.G2.reshape((-1,) + (1,) * (h.ndim - 1))
        after = np.concatenate([zeros, np.cumsum(G2 * h, axis=0)])
        scale = self.own_scale.reshape((-1,) + (1,) * (h.ndim - 1))
        return before[self.own_count] + scale * (after[-1] - after[self.own_count])


@dataclass(frozen=True, eq=False)
class SubdistFit:
    beta: np.ndarray
    s1n: np.ndarray
    s2n: np.ndarray
    grid: np.ndarray            # merged grid of observed times <= tau (plus tau)
    delta: np.ndarray           # interval lengths g[k] - g[k-1]
    h0_star: np.ndarray         # baseline at each grid time
    h0_mod: np.ndarray          # running maximum of h0_star
    xbar: np.ndarray            # K x (p+1) weighted covariate mean
    s0: np.ndarray              # sum_j Yhat_j(g_k)^2
    event_counts: np.ndarray    # cause-of-interest events at each grid time
    event_z: np.ndarray         # K x (p+1) sum of covariate rows of those events
    z: np.ndarray               # n x (p+1) covariate rows entering the second stage
    tau: float
    mode: str
    names: tuple
    offsets: np.ndarray

    @property
    def n(self):
        return self.z.shape[0]

    @property
    def event_times(self):
        return self.grid[self.event_counts > 0]

    @property
    def baseline(self):
        return StepFunction(self.grid, self.h0_star)

    @property
    def baseline_mod(self):
        return StepFunction(self.grid, self.h0_mod)


def time_grid(ipcw, tau):
    grid = ipcw.grid[ipcw.grid <= tau]
    if grid.shape[0] == 0 or grid[-1] < tau:
        grid = np.append(grid, tau)
    delta = np.diff(grid, prepend=0.0)
    return grid, delta


def default_tau(dataset):
    return float(dataset.time[dataset.is_event].max())


def resolve_tau(dataset, tau):
    if tau is None or tau == "auto":
        return default_tau(dataset)
    tau = float(tau)
    if not 0 < tau <= dataset.time.max():
        raise DataError(f"tau must satisfy 0 < tau <= {dataset.time.max()} (max observed time), "
                        f"got {tau}", module="additive_fit")
    return tau


def iv_covariates(dataset, first):
    """Second-stage rows ``X_IOE X_Io,i = (Xhat_e,i, X_o,i)``."""
    return design_matrix(dataset) @ first.x_ioe.T


def naive_covariates(dataset):
    return np.column_stack([dataset.exposure, dataset.covariates])


def _second_stage(dataset, ipcw, z, tau, mode):
    n, d = z.shape
    grid, delta = time_grid(ipcw, tau)
    rs = WeightedRiskSet(ipcw, grid)
    s0 = rs.column_sums(np.ones(n))
    needed = (delta > 0) | np.isin(grid, dataset.time[dataset.is_event])
    if np.any(s0[needed] < RISK_SET_FLOOR):
        k = int(np.flatnonzero(needed & (s0 < RISK_SET_FLOOR))[0])
        raise RiskSetError(f"weighted risk set exhausted at t={grid[k]:.6g} before tau={tau:.6g}")

    events = np.flatnonzero(dataset.is_event & (dataset.time <= tau))
    if events.shape[0] == 0:
        raise RiskSetError(f"no cause-{dataset.cause_of_interest} events at or before tau={tau:.6g}")
    ev_k = np.searchsorted(grid, dataset.time[events])
    event_counts = np.bincount(ev_k, minlength=grid.shape[0]).astype(float)
    event_z = np.zeros((grid.shape[0], d))
    np.add.at(event_z, ev_k, z[events])

    with np.errstate(divide="ignore", invalid="ignore"):
        xbar = rs.column_sums(z) / s0[:, None]
    xbar[s0 < RISK_SET_FLOOR] = 0.0
    szz = rs.column_sums(z[:, :, None] * z[:, None, :])
    centered_zz = szz - s0[:, None, None] * xbar[:, :, None] * xbar[:, None, :]
    s2n = np.tensordot(delta, centered_zz, axes=1) / n
    s2n = (s2n + s2n.T) / 2
    s1n = (z[events] - xbar[ev_k]).sum(axis=0) / n

    cond = np.linalg.cond(s2n)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IdentifiabilityError(
            f"second-stage matrix S2n is singular (condition number {cond:.3g}); "
            "the instrument may be too weak to identify the exposure effect")
    beta = np.linalg.solve(s2n, s1n)

    dh = _baseline_increments(event_counts, s0, delta, xbar, beta)
    h0_star = np.cumsum(dh)
    names = ("exposure",) + tuple(dataset.covariate_names)
    offsets = dataset.offsets if dataset.offsets is not None else np.zeros(dataset.p + 2)
    return SubdistFit(beta=beta, s1n=s1n, s2n=s2n, grid=grid, delta=delta, h0_star=h0_star,
                      h0_mod=np.maximum(monotone_baseline(h0_star), 0.0), xbar=xbar, s0=s0,
                      event_counts=event_counts, event_z=event_z, z=z, tau=float(tau),
                      mode=mode, names=names, offsets=np.asarray(offsets, dtype=float))


def _baseline_increments(event_counts, s0, delta, xbar, beta):
    with np.errstate(divide="ignore", invalid="ignore"):
        jumps = np.where(event_counts > 0, event_counts / s0, 0.0)
    return jumps - delta * (xbar @ beta)


def fit_iv(dataset, first, ipcw, tau=None):
    """Two-stage IV fit: exposure replaced by its first-stage prediction."""
    tau = resolve_tau(dataset, tau)
    return _second_stage(dataset, ipcw, iv_covariates(dataset, first), tau, "iv")


def fit_naive(dataset, ipcw, tau=None):
    """Same estimating equations with the observed exposure."""
    tau = resolve_tau(dataset, tau)
    return _second_stage(dataset, ipcw, naive_covariates(dataset), tau, "naive")


def estimate_baseline(fit, beta=None):
    """Baseline cumulative subdistribution hazard on the fit grid.

    With ``beta=None`` this reproduces ``fit.h0_star``; passing another
    coefficient vector re-evaluates the same display at that value.
    """
    beta = fit.beta if beta is None else np.asarray(beta, dtype=float)
    if np.any(fit.s0[fit.event_counts > 0] < RISK_SET_FLOOR):
        raise RiskSetError("weighted risk set exhausted at an event time")
    dh = _baseline_increments(fit.event_counts, fit.s0, fit.delta, fit.xbar, beta)
    return StepFunction(fit.grid, np.cumsum(dh))


def monotone_baseline(h0_star):
    """Running maximum of a baseline (array or :class:`StepFunction`)."""
    if isinstance(h0_star, StepFunction):
        return StepFunction(h0_star.knots, np.maximum.accumulate(h0_star.values))
    return np.maximum.accumulate(np.asarray(h0_star, dtype=float))
