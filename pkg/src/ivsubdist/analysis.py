"""End-to-end fit: center, censoring KM, first stage, second stage, variance."""

from dataclasses import dataclass
from typing import Optional

from .additive import SubdistFit, fit_iv, fit_naive, resolve_tau
from .censoring import build_ipcw, fit_km_censoring
from .data import Dataset, FitOptions, center
from .first_stage import FirstStageFit, fit_first_stage, weak_iv_diagnostic
from .inference import (InfluenceRecords, VarianceComponents, influence_functions,
                        sandwich_variance, wald_summary)


@dataclass(frozen=True, eq=False)
class Analysis:
    dataset: Dataset            # centered
    fit: SubdistFit
    first: Optional[FirstStageFit]
    influence: InfluenceRecords
    variance: VarianceComponents
    censoring: object
    options: FitOptions

    @property
    def beta(self):
        return self.fit.beta

    @property
    def se(self):
        return self.variance.se

    def summary(self, level=None):
        return wald_summary(self.fit, self.variance, self.options.ci_level if level is None else level)

    def weak_iv(self):
        return None if self.first is None else weak_iv_diagnostic(self.first)


def analyze(dataset, options=None, mode="iv"):
    """Fit the IV (``mode="iv"``) or naive (``mode="naive"``) model with sandwich variance."""
    if mode not in ("iv", "naive"):
        raise ValueError(f"mode must be 'iv' or 'naive', got {mode!r}")
    options = options or FitOptions()
    data = center(dataset)
    tau = resolve_tau(data, options.tau)
    G = fit_km_censoring(data, tau)
    ipcw = build_ipcw(data, G)
    first = fit_first_stage(data) if mode == "iv" else None
    fit = fit_iv(data, first, ipcw, tau) if mode == "iv" else fit_naive(data, ipcw, tau)
    records = influence_functions(fit, data, ipcw, first)
    variance = sandwich_variance(records, fit, ipcw, first)
    return Analysis(dataset=data, fit=fit, first=first, influence=records, variance=variance,
                    censoring=G, options=options)
