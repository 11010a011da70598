"""Kaplan-Meier estimate of the censoring distribution and IPCW processes.

Conventions
-----------
``G(t) = P(C >= t)`` is left-continuous: ``G(t)`` is the product of the
Kaplan-Meier factors over censoring times strictly less than ``t``. At a
tied time, failures stay in the censoring risk set, i.e. the number at risk
for censoring at ``u`` is ``#{T*_j >= u}``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CensoringError


@dataclass(frozen=True, eq=False)
class CensoringSurvival:
    jump_times: np.ndarray      # distinct censoring times, ascending
    values: np.ndarray          # G just after each jump (right-continuous)
    risk_counts: np.ndarray
    censor_counts: np.ndarray

    @classmethod
    def unit(cls):
        """``G == 1``; the censoring-free special case."""
        empty = np.zeros(0)
        return cls(empty, empty.copy(), empty.copy(), empty.copy())

    @property
    def hazard_increments(self):
        return self.censor_counts / self.risk_counts

    def __call__(self, t):
        """Left-continuous ``P(C >= t)``."""
        idx = np.searchsorted(self.jump_times, t, side="left")
        return self._lookup(idx)

    def right(self, t):
        """Right-continuous ``P(C > t)``."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self._lookup(idx)

    def _lookup(self, idx):
        padded = np.concatenate([[1.0], self.values])
        return padded[idx]

    def step_table(self):
        """(time, G) pairs describing the right-continuous step function."""
        return np.column_stack([np.concatenate([[0.0], self.jump_times]),
                                np.concatenate([[1.0], self.values])])


def fit_km_censoring(dataset, tau=None):
    """Reverse Kaplan-Meier: censorings are the events, failures censor.

    Raises :class:`CensoringError` when ``G`` has dropped to zero at or
    before ``tau``.
    """
    time = dataset.time
    censored = dataset.is_censored
    cens_times, cens_counts = np.unique(time[censored], return_counts=True)
    sorted_time = np.sort(time)
    at_risk = time.shape[0] - np.searchsorted(sorted_time, cens_times, side="left")
    factors = 1.0 - cens_counts / at_risk
    G = CensoringSurvival(cens_times, np.cumprod(factors), at_risk.astype(float),
                          cens_counts.astype(float))
    if tau is not None and G(tau) <= 0.0:
        raise CensoringError(f"censoring survival reaches 0 at or before tau={tau}; reduce tau")
    return G


@dataclass(frozen=True, eq=False)
class IpcwProcesses:
    """Weighted counting and at-risk processes for the cause of interest.

    ``R_i(t) = r_i(t) G(t) / G(T_i ^ t)`` with ``r_i(t) = I(C_i >= T_i ^ t)``;
    ``Yhat_i(t) = R_i(t) Y_i(t)`` with ``Y_i(t) = 1 - N_i(t-)``.
    ``grid`` holds all distinct observed times and ``G_grid`` the
    left-continuous ``G`` there, so every evaluation below is a lookup.
    """

    time: np.ndarray
    event: np.ndarray
    competing: np.ndarray
    censored: np.ndarray
    grid: np.ndarray
    G_grid: np.ndarray
    G_own: np.ndarray           # G(T*_i), left-continuous
    G: CensoringSurvival

    @property
    def n(self):
        return self.time.shape[0]

    def event_jump_time(self, i):
        return float(self.time[i]) if self.event[i] else None

    def _ratio(self, t):
        if np.any((self.time < t) & ~self.censored & (self.G_own <= 0.0)):
            raise CensoringError(f"weight undefined at t={t}: G(T_i ^ t) = 0")
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.G_own > 0, self.G(t) / self.G_own, 0.0)

    def weight(self, t):
        """``R_i(t)`` for every subject at a scalar time ``t``."""
        t = float(t)
        failed = ~self.censored
        return np.where(self.time >= t, 1.0, np.where(failed, self._ratio(t), 0.0))

    def at_risk(self, t):
        """``Yhat_i(t)`` for every subject at a scalar time ``t``."""
        t = float(t)
        return np.where(self.time >= t, 1.0, np.where(self.competing, self._ratio(t), 0.0))

    def counting(self, t):
        """``Nhat_i(t) = R_i(t) N_i(t)``."""
        t = float(t)
        return np.where(self.event & (self.time <= t), self.weight(t), 0.0)

    def at_risk_matrix(self, times):
        """Dense ``len(times) x n`` matrix of ``Yhat_i(t)``."""
        return np.vstack([self.at_risk(t) for t in np.atleast_1d(times)])


def build_ipcw(dataset, G):
    grid = np.unique(dataset.time)
    return IpcwProcesses(
        time=dataset.time,
        event=dataset.is_event,
        competing=dataset.is_competing,
        censored=dataset.is_censored,
        grid=grid,
        G_grid=G(grid),
        G_own=G(dataset.time),
        G=G,
    )
