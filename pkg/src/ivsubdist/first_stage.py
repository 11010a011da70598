"""First-stage least squares of the exposure on instrument and covariates."""

from dataclasses import dataclass

import numpy as np

from .errors import SingularDesignError

COND_LIMIT = 1e12
WEAK_F_THRESHOLD = 10.0


@dataclass(frozen=True, eq=False)
class FirstStageFit:
    gamma: np.ndarray          # (intercept, instrument, covariates...)
    gamma_se: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    sigma2_hat: float
    f_stat: float
    x_ioe: np.ndarray          # (p+1) x (p+2) contrast matrix
    xtx_inv: np.ndarray
    column_names: tuple

    @property
    def n(self):
        return self.fitted.shape[0]

    @property
    def p(self):
        return self.gamma.shape[0] - 2


def design_matrix(dataset):
    """``X_Io = [1, X_I, X_o]``."""
    return np.column_stack([np.ones(dataset.n), dataset.instrument, dataset.covariates])


def check_design(X, names, limit=COND_LIMIT):
    """Raise :class:`SingularDesignError` if ``X`` is numerically rank deficient.

    Columns are scaled to unit norm first so the condition number reflects
    collinearity rather than units. The offending column is the one carrying
    the most weight in the smallest right singular vector.
    """
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        j = int(np.flatnonzero(norms == 0)[0])
        raise SingularDesignError(f"design column {names[j]!r} is identically zero", column=names[j])
    _, s, vt = np.linalg.svd(X / norms, full_matrices=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    if cond > limit:
        j = int(np.argmax(np.abs(vt[-1])))
        raise SingularDesignError(
            f"singular first-stage design (condition number {cond:.3g}); column {names[j]!r} is collinear",
            column=names[j])
    return cond


def fit_first_stage(dataset):
    n, p = dataset.n, dataset.p
    names = ("intercept", "instrument") + tuple(dataset.covariate_names)
    if n <= p + 2:
        raise SingularDesignError(f"need n > p + 2 subjects for the first stage (n={n}, p={p})")
    X = design_matrix(dataset)
    check_design(X, names)

    gamma = np.linalg.lstsq(X, dataset.exposure, rcond=None)[0]
    fitted = X @ gamma
    residuals = dataset.exposure - fitted
    dof = n - p - 2
    sigma2 = float(residuals @ residuals / dof)
    xtx_inv = np.linalg.inv(X.T @ X)
    xtx_inv = (xtx_inv + xtx_inv.T) / 2
    se = np.sqrt(sigma2 * np.diag(xtx_inv))
    if se[1] > 0:
        f_stat = float((gamma[1] / se[1]) ** 2)
    else:
        f_stat = 0.0 if gamma[1] == 0 else float("inf")

    x_ioe = np.zeros((p + 1, p + 2))
    x_ioe[0] = gamma
    x_ioe[1:, 2:] = np.eye(p)
    return FirstStageFit(gamma=gamma, gamma_se=se, fitted=fitted, residuals=residuals,
                         sigma2_hat=sigma2, f_stat=f_stat, x_ioe=x_ioe, xtx_inv=xtx_inv,
                         column_names=names)


def weak_iv_diagnostic(fit, threshold=WEAK_F_THRESHOLD):
    """Weak-instrument screen based on the first-stage F statistic.

    ``f_stat <= threshold`` is flagged weak (the boundary counts as weak).
    Also reports the residual variance ratio between the upper and lower
    halves of the fitted exposure, a rough look at the constant-variance
    requirement; no formal test is attached to it.
    """
    weak = not fit.f_stat > threshold
    order = np.argsort(fit.fitted, kind="stable")
    half = order.shape[0] // 2
    lo, hi = fit.residuals[order[:half]], fit.residuals[order[half:]]
    ratio = float(np.var(hi) / np.var(lo)) if half > 1 and np.var(lo) > 0 else float("nan")
    if weak:
        advice = (f"first-stage F = {fit.f_stat:.3g} <= {threshold:g}: the instrument is weak; "
                  "IV estimates may be unstable. Fit the naive model as well and compare.")
    else:
        advice = (f"first-stage F = {fit.f_stat:.3g} > {threshold:g}. Compare with the naive fit: "
                  "a large difference points to confounding in the naive estimate.")
    return {"f_stat": fit.f_stat, "weak": weak, "threshold": threshold,
            "residual_dispersion_ratio": ratio, "advice": advice}
