"""Monte Carlo engine for the two-stage estimator.

Data-generating process
-----------------------
``X_I`` is Bernoulli(1/2) on {0, 1}; ``X_o`` is standard normal and the
unmeasured ``X_u`` is standard normal (or uniform on [-1/2, 1/2]). With the
linear link ``X_e = gamma2 X_I + 0.5 X_o - X_u``; with the logistic link
``X_e`` is Bernoulli with a logit linear in ``(X_I, X_o, X_u)``.

With ``b = beta_e X_e + beta_o X_o + beta_u X_u`` and ``t* = min(t, t0)``
the cause is drawn from ``P(eps = 1 | X) = 1 - (1 - p) exp(-b t0)`` and the
time from the conditional CDFs

    F(t | eps=1) = [1 - {1 - p (1 - e^-t)} exp(-b t*)] / P(eps = 1 | X)
    F(t | eps=2) = (1 - e^-t) exp(-b (t* - t0))

so the subdistribution of cause 1 is additive in ``X`` up to ``t0`` and
the two causes add up to one. For some ``b`` either CDF rises, dips and
rises again on ``[0, t0]``; times are then drawn from the generalized
inverse ``inf{t : F(t) >= u}``. Subjects with ``P(eps = 1 | X) < 0`` are
redrawn and counted.

Replicate ``r`` of a scenario with master seed ``s`` uses the stream
``SeedSequence(s, spawn_key=(1, r))``, so results do not depend on the
order or process in which replicates run.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .analysis import analyze
from .data import FitOptions, center, from_arrays
from .errors import NumericalError, SimulationError
from .first_stage import fit_first_stage

BISECTION_TOL = 1e-10
PILOT_SIZE = 100_000
CENSORING_TOL = 0.005
RATE_BOUNDS = (1e-6, 1e3)


@dataclass(frozen=True)
class SimScenario:
    n: int = 1000
    gamma2: float = 0.4
    beta3: float = 0.4
    target_censoring: float = 0.30
    beta_e: float = 0.5
    beta_o: float = 0.2
    p_mix: float = 0.8
    t0: float = 0.6
    link: str = "linear"
    confounder: str = "normal"
    # logit coefficients (intercept, X_I, X_o, X_u) for the logistic link
    logit_coef: tuple = (-4.4, 3.7, 0.3, 1.0)
    # "resample" redraws subjects whose conditional CDFs are not proper
    # (non-monotone); "envelope" keeps them and samples the generalized inverse
    invalid: str = "resample"
    reps: int = 1000
    seed: int = 20240601
    # None fits up to t0, where the covariate effect stops; "auto" uses the
    # largest cause-1 event time of each replicate
    tau: Optional[object] = None
    level: float = 0.95

    def __post_init__(self):
        if not 0 < self.p_mix < 1:
            raise ValueError(f"p_mix must lie in (0, 1), got {self.p_mix}")
        if not self.t0 > 0:
            raise ValueError(f"t0 must be positive, got {self.t0}")
        if self.n < 10:
            raise ValueError(f"n must be at least 10, got {self.n}")
        if not 0 <= self.target_censoring < 1:
            raise ValueError(f"target_censoring must lie in [0, 1), got {self.target_censoring}")
        if self.link not in ("linear", "logistic"):
            raise ValueError(f"link must be 'linear' or 'logistic', got {self.link!r}")
        if self.confounder not in ("normal", "uniform"):
            raise ValueError(f"confounder must be 'normal' or 'uniform', got {self.confounder!r}")
        if self.invalid not in ("resample", "envelope"):
            raise ValueError(f"invalid must be 'resample' or 'envelope', got {self.invalid!r}")
        if self.reps < 1:
            raise ValueError("reps must be positive")

    @property
    def fit_tau(self):
        if self.tau is None:
            return self.t0
        return None if self.tau == "auto" else float(self.tau)

    @property
    def beta(self):
        return np.array([self.beta_e, self.beta_o, self.beta3])

    @classmethod
    def logistic_default(cls, **kw):
        """Binary exposure (about 18% prevalence) with a uniform confounder, n = 986."""
        base = dict(n=986, link="logistic", confounder="uniform", beta3=0.2, gamma2=float("nan"))
        base.update(kw)
        return cls(**base)


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _covariates(scenario, rng, m):
    x_i = rng.integers(0, 2, size=m).astype(float)
    x_o = rng.standard_normal(m)
    if scenario.confounder == "normal":
        x_u = rng.standard_normal(m)
    else:
        x_u = rng.uniform(-0.5, 0.5, size=m)
    if scenario.link == "linear":
        x_e = scenario.gamma2 * x_i + 0.5 * x_o - x_u
    else:
        a0, a_i, a_o, a_u = scenario.logit_coef
        prob = 1.0 / (1.0 + np.exp(-(a0 + a_i * x_i + a_o * x_o + a_u * x_u)))
        x_e = (rng.random(m) < prob).astype(float)
    return x_i, x_o, x_u, x_e


def cause_probability(scenario, b):
    """``P(eps = 1 | X)`` as a function of the linear predictor ``b``."""
    return 1.0 - (1.0 - scenario.p_mix) * np.exp(-b * scenario.t0)


def valid_predictor(scenario, b):
    """Subjects the scenario keeps: ``P(eps=1|X) >= 0`` and, under
    ``invalid="resample"``, both conditional CDFs nondecreasing."""
    ok = cause_probability(scenario, b) >= 0
    if scenario.invalid == "resample":
        ok &= (_peak_cause1(scenario, b) >= scenario.t0) & (_peak_cause2(scenario, b) >= scenario.t0)
    return ok


def cdf_cause1(scenario, b, t):
    p, t0 = scenario.p_mix, scenario.t0
    ts = np.minimum(t, t0)
    num = 1.0 - (1.0 - p * (1.0 - np.exp(-t))) * np.exp(-b * ts)
    return num / cause_probability(scenario, b)


def cdf_cause2(scenario, b, t):
    t0 = scenario.t0
    return (1.0 - np.exp(-t)) * np.exp(-b * (np.minimum(t, t0) - t0))


def _peak_cause1(scenario, b):
    """End of the initial increasing stretch of ``F(t | eps=1)`` on [0, t0]."""
    p, t0 = scenario.p_mix, scenario.t0
    # derivative sign follows phi(t) = p e^-t (1 + b) + b (1 - p), decreasing in t
    phi0 = p * (1 + b) + b * (1 - p)
    phi_t0 = p * math.exp(-t0) * (1 + b) + b * (1 - p)
    tc = np.full(b.shape, t0)
    tc[phi0 <= 0] = 0.0
    mid = (phi0 > 0) & (phi_t0 < 0)
    tc[mid] = np.log(p * (1 + b[mid]) / (-b[mid] * (1 - p)))
    return tc


def _peak_cause2(scenario, b):
    t0 = scenario.t0
    tc = np.full(b.shape, t0)
    pos = b > 0
    tc[pos] = np.minimum(np.log((1 + b[pos]) / b[pos]), t0)
    return tc


def _bisect(cdf, u, hi):
    lo = np.zeros_like(u)
    hi = hi.copy()
    while np.any(hi - lo > BISECTION_TOL):
        mid = 0.5 * (lo + hi)
        below = cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return hi


def _inverse(cdf, tail, peak, u, b):
    """Generalized inverse when ``cdf`` increases on [0, peak], may dip, then
    increases from ``t0`` on with closed-form inverse ``tail``."""
    t = np.empty_like(u)
    early = u <= cdf(peak)
    idx = np.flatnonzero(early)
    if idx.shape[0]:
        def sub(s):
            full = np.zeros_like(u)
            full[idx] = s
            return cdf(full)[idx]
        t[idx] = _bisect(sub, u[idx], peak[idx])
    late = ~early
    t[late] = tail(u[late], b[late])
    return t


def draw_times(scenario, b, cause, u):
    """Event times given causes and uniforms ``u``."""
    p, t0 = scenario.p_mix, scenario.t0
    t = np.empty_like(u)
    c1 = cause == 1
    for mask, cdf, peak_fn, tail in (
        (c1, cdf_cause1, _peak_cause1,
         lambda uu, bb: -np.log((1 - uu) * cause_probability(scenario, bb) * np.exp(bb * t0) / p)),
        (~c1, cdf_cause2, _peak_cause2, lambda uu, bb: -np.log1p(-uu)),
    ):
        if not np.any(mask):
            continue
        bb, uu = b[mask], u[mask]
        peak = peak_fn(scenario, bb)
        t[mask] = _inverse(lambda s, bb=bb, cdf=cdf: cdf(scenario, bb, s), tail, peak, uu, bb)
    return t


@dataclass(frozen=True, eq=False)
class Population:
    """Latent draws before censoring."""

    x_i: np.ndarray
    x_o: np.ndarray
    x_u: np.ndarray
    x_e: np.ndarray
    cause: np.ndarray
    time: np.ndarray
    redrawn: int


def draw_population(scenario, rng, m):
    """Covariates, causes and event times for ``m`` subjects."""
    x_i, x_o, x_u, x_e = _covariates(scenario, rng, m)
    redrawn = 0
    for _ in range(1000):
        b = scenario.beta_e * x_e + scenario.beta_o * x_o + scenario.beta3 * x_u
        bad = ~valid_predictor(scenario, b)
        if not np.any(bad):
            break
        k = int(bad.sum())
        redrawn += k
        new = _covariates(scenario, rng, k)
        for arr, fresh in zip((x_i, x_o, x_u, x_e), new):
            arr[bad] = fresh
    else:
        raise SimulationError("could not draw covariates with a valid cause probability")
    prob1 = cause_probability(scenario, b)
    cause = np.where(rng.random(m) < prob1, 1, 2)
    time = draw_times(scenario, b, cause, rng.random(m))
    return Population(x_i, x_o, x_u, x_e, cause, time, redrawn)


@dataclass(frozen=True)
class CensoringCalibration:
    rate: float
    pilot_fraction: float
    degenerate: bool = False


def calibrate_censoring(scenario, pilot_size=PILOT_SIZE):
    """Exponential censoring rate giving the target censored fraction.

    Bisection on ``log(rate)`` over one fixed pilot sample, so the censored
    fraction ``mean(E < rate * T)`` is a deterministic nondecreasing
    function of the rate.
    """
    target = scenario.target_censoring
    if target == 0:
        return CensoringCalibration(rate=0.0, pilot_fraction=0.0, degenerate=True)
    rng = _stream(scenario.seed, 0)
    pop = draw_population(scenario, rng, pilot_size)
    e = rng.standard_exponential(pilot_size)

    def fraction(rate):
        return float(np.mean(e < rate * pop.time))

    lo, hi = RATE_BOUNDS
    f_lo, f_hi = fraction(lo), fraction(hi)
    if not f_lo <= target <= f_hi:
        raise SimulationError(f"target censoring {target:.3f} unreachable for rates in "
                              f"[{lo:g}, {hi:g}] (fractions {f_lo:.3f}..{f_hi:.3f})")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        f_mid = fraction(mid)
        if not f_lo <= f_mid <= f_hi:
            raise SimulationError("censored fraction is not monotone in the rate")
        if abs(f_mid - target) <= CENSORING_TOL / 10:
            break
        if f_mid < target:
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    if abs(f_mid - target) > CENSORING_TOL:
        raise SimulationError(f"censoring calibration stalled at {f_mid:.4f} (target {target:.4f})")
    return CensoringCalibration(rate=mid, pilot_fraction=f_mid)


def generate_replicate(scenario, rep_index, rate):
    """Observed data for one replicate as a :class:`Dataset`, plus the redraw count."""
    rng = _stream(scenario.seed, 1, rep_index)
    pop = draw_population(scenario, rng, scenario.n)
    cens = rng.standard_exponential(scenario.n) / rate if rate > 0 else np.full(scenario.n, np.inf)
    observed = np.minimum(pop.time, cens)
    status = np.where(pop.time <= cens, pop.cause, 0)
    data = from_arrays(observed, status, pop.x_e, pop.x_i, pop.x_o[:, None],
                       covariate_names=("x_o",), n_causes=2)
    return data, pop.redrawn


@dataclass(frozen=True)
class ReplicateRecord:
    rep: int
    estimate: dict
    se: dict
    f_stat: float
    censored_fraction: float
    redrawn: int
    errors: dict = field(default_factory=dict)
    # mode -> (max |sum phi1|, max asymmetry, smallest eigenvalue / trace) of each fit
    checks: dict = field(default_factory=dict)


def fit_checks(result):
    cov = result.variance.covariance
    eig = np.linalg.eigvalsh(cov)
    return (float(np.abs(result.influence.phi1.sum(axis=0)).max()),
            float(np.abs(cov - cov.T).max()),
            float(eig.min() / max(np.trace(cov), np.finfo(float).tiny)))


def run_replicate(scenario, rep_index, rate, methods=("iv", "naive")):
    data, redrawn = generate_replicate(scenario, rep_index, rate)
    options = FitOptions(tau=scenario.fit_tau, ci_level=scenario.level)
    est, se, errors, checks = {}, {}, {}, {}
    f_stat = float("nan")
    for mode in methods:
        try:
            result = analyze(data, options, mode)
        except NumericalError as exc:
            est[mode], se[mode], errors[mode] = float("nan"), float("nan"), exc.code
            continue
        est[mode], se[mode] = float(result.beta[0]), float(result.se[0])
        checks[mode] = fit_checks(result)
        if mode == "iv":
            f_stat = result.first.f_stat
    if "iv" not in methods or np.isnan(f_stat):
        try:
            f_stat = fit_first_stage(center(data)).f_stat
        except NumericalError:
            f_stat = 0.0
    return ReplicateRecord(rep=rep_index, estimate=est, se=se, f_stat=f_stat,
                           censored_fraction=float(np.mean(data.is_censored)),
                           redrawn=redrawn, errors=errors, checks=checks)


@dataclass(frozen=True)
class MethodSummary:
    successes: int
    failures: int
    bias: float
    empirical_se: float
    mean_se: float
    coverage: float
    median_bias: float
    robust_se: float        # 1.4826 * MAD of the estimates
    median_se: float

    @property
    def reliable(self):
        """False when the spread is too large for the normal summaries to mean much."""
        return self.successes > 1 and self.empirical_se < 5.0


def summarize(estimates, ses, truth, level=0.95):
    estimates, ses = np.asarray(estimates, float), np.asarray(ses, float)
    ok = np.isfinite(estimates) & np.isfinite(ses)
    e, s = estimates[ok], ses[ok]
    n_ok = int(ok.sum())
    if n_ok == 0:
        nan = float("nan")
        return MethodSummary(0, int(estimates.shape[0]), nan, nan, nan, nan, nan, nan, nan)
    z = stats.norm.ppf(0.5 + level / 2)
    covered = np.abs(e - truth) <= z * s
    med = float(np.median(e))
    return MethodSummary(
        successes=n_ok,
        failures=int(estimates.shape[0] - n_ok),
        bias=float(e.mean() - truth),
        empirical_se=float(e.std(ddof=1)) if n_ok > 1 else float("nan"),
        mean_se=float(s.mean()),
        coverage=float(covered.mean()),
        median_bias=med - truth,
        robust_se=float(1.4826 * np.median(np.abs(e - med))),
        median_se=float(np.median(s)),
    )


@dataclass(frozen=True, eq=False)
class SimResult:
    scenario: SimScenario
    rate: float
    methods: dict               # mode -> MethodSummary
    records: list
    weak_iv_rate: float
    redrawn: int
    mean_censored: float

    def estimates(self, mode):
        return np.array([r.estimate.get(mode, np.nan) for r in self.records])

    def ses(self, mode):
        return np.array([r.se.get(mode, np.nan) for r in self.records])

    def to_dict(self):
        return {"scenario": asdict(self.scenario), "rate": self.rate,
                "methods": {k: asdict(v) for k, v in self.methods.items()},
                "weak_iv_rate": self.weak_iv_rate, "redrawn": self.redrawn,
                "mean_censored": self.mean_censored}


def _run_chunk(args):
    scenario, reps, rate, methods = args
    return [run_replicate(scenario, r, rate, methods) for r in reps]


def run_monte_carlo(scenario, workers=1, methods=("iv", "naive"), rate=None):
    """Fit every replicate with each method and summarize ``beta_e``.

    Replicates whose fit raises a numerical error count as failures and are
    left out of the summaries. Raises :class:`SimulationError` if every
    replicate fails for every method.
    """
    if rate is None:
        rate = calibrate_censoring(scenario).rate
    reps = list(range(scenario.reps))
    if workers <= 1:
        records = _run_chunk((scenario, reps, rate, methods))
    else:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(scenario, c, rate, methods) for c in chunks]))
        records = sorted((r for part in parts for r in part), key=lambda r: r.rep)
    summaries = {}
    for mode in methods:
        est = [r.estimate[mode] for r in records]
        se = [r.se[mode] for r in records]
        summaries[mode] = summarize(est, se, scenario.beta_e, scenario.level)
    if all(s.successes == 0 for s in summaries.values()):
        raise SimulationError("every replicate failed")
    f = np.array([r.f_stat for r in records])
    return SimResult(scenario=scenario, rate=rate, methods=summaries, records=records,
                     weak_iv_rate=float(np.mean(~(f > 10.0))),
                     redrawn=int(sum(r.redrawn for r in records)),
                     mean_censored=float(np.mean([r.censored_fraction for r in records])))


CONFOUNDING_LEVELS = {"none": 0.0, "weak": 0.2, "strong": 0.4}
IV_LEVELS = {"none": 0.0, "weak": 0.2, "strong": 0.4}


def table1_grid(confounding=("none", "weak", "strong"), iv=("none", "weak", "strong"),
                sizes=(100, 400, 1000), censoring=(0.5, 0.3), reps=1000, seed=20240601,
                workers=1, tau=None, invalid="resample"):
    """Run a grid of linear-link scenarios; yields ``(labels, SimResult)`` per cell."""
    cell = 0
    for conf in confounding:
        for strength in iv:
            for n in sizes:
                for cens in censoring:
                    scenario = SimScenario(n=n, gamma2=IV_LEVELS[strength],
                                           beta3=CONFOUNDING_LEVELS[conf],
                                           target_censoring=cens, reps=reps,
                                           seed=seed + cell, tau=tau, invalid=invalid)
                    cell += 1
                    yield (conf, strength, n, cens), run_monte_carlo(scenario, workers)
