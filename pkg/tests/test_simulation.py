import numpy as np
import pytest
from scipy import integrate, stats

from ivsubdist.errors import SimulationError
from ivsubdist.simulation import (SimScenario, _stream, calibrate_censoring, cause_probability,
                                  cdf_cause1, cdf_cause2, draw_population, draw_times,
                                  generate_replicate, run_monte_carlo, summarize,
                                  valid_predictor)


def test_cause_probability_at_zero():
    assert cause_probability(SimScenario(), np.array([0.0]))[0] == pytest.approx(0.8, abs=1e-15)


def test_scenario_validation():
    for bad in (dict(p_mix=1.0), dict(t0=0.0), dict(n=5), dict(link="probit"), dict(invalid="x")):
        with pytest.raises(ValueError):
            SimScenario(**bad)


def test_cdfs_proper_on_valid_range():
    sc = SimScenario()
    b = np.linspace(-0.68, 1.2, 40)
    assert np.all(valid_predictor(sc, b))
    t = np.linspace(0, 6, 400)
    for bi in b:
        for cdf in (cdf_cause1, cdf_cause2):
            f = cdf(sc, np.full(t.shape, bi), t)
            assert f[0] == pytest.approx(0.0, abs=1e-15)
            assert np.all(np.diff(f) >= -1e-14)
            assert f[-1] < 1 + 1e-12
    # cause 2 plateaus' growth comes only from 1 - e^-t after t0
    tt = np.array([0.6, 1.0, 3.0])
    np.testing.assert_allclose(cdf_cause2(sc, np.full(3, 0.7), tt), 1 - np.exp(-tt))


def test_invalid_predictors_detected():
    sc = SimScenario()
    assert not valid_predictor(sc, np.array([-0.9]))[0]      # P(eps=1) < 0
    assert not valid_predictor(sc, np.array([1.5]))[0]       # non-monotone CDF
    assert valid_predictor(SimScenario(invalid="envelope"), np.array([1.5]))[0]


@pytest.mark.parametrize("cause,b", [(1, 0.0), (1, 0.8), (1, -0.5), (2, 0.0), (2, 1.0), (2, -0.6)])
def test_inverse_cdf_draws_pass_ks(cause, b):
    sc = SimScenario()
    rng = np.random.default_rng(17)
    m = 4000
    t = draw_times(sc, np.full(m, b), np.full(m, cause), rng.random(m))
    cdf = cdf_cause1 if cause == 1 else cdf_cause2
    res = stats.kstest(t, lambda s: cdf(sc, np.full(np.shape(s), b), s))
    assert res.pvalue > 1e-3


def test_generalized_inverse_under_envelope():
    sc = SimScenario(invalid="envelope")
    b = np.full(1, 1.4)
    cdf = lambda s: cdf_cause2(sc, np.full(np.shape(s), 1.4), s)
    for u in (0.05, 0.2, 0.45):
        t = draw_times(sc, b, np.array([2]), np.array([u]))[0]
        assert cdf(np.array([t]))[0] >= u - 1e-8
        grid = np.linspace(0, t - 1e-6, 200)
        assert np.all(cdf(grid) < u + 1e-9)


def test_marginal_cause_probability():
    sc = SimScenario(invalid="envelope", beta3=0.4, gamma2=0.4)
    pop = draw_population(sc, _stream(3, 9), 1_000_000)
    freq = np.mean(pop.cause == 1)

    # b | X_I is normal with mean beta_e gamma2 X_I and a fixed variance
    sd = np.sqrt((0.5 * 0.5 + 0.2) ** 2 + (0.4 - 0.5) ** 2)

    def mixture(x_i):
        mu = 0.5 * 0.4 * x_i
        lo = np.log(0.2) / 0.6      # P(eps=1|b) < 0 below this point
        dens = lambda b: stats.norm.pdf(b, mu, sd)
        num = integrate.quad(lambda b: cause_probability(sc, np.array([b]))[0] * dens(b), lo, np.inf)[0]
        return num / stats.norm.sf(lo, mu, sd)

    analytic = 0.5 * (mixture(0.0) + mixture(1.0))
    assert abs(freq - analytic) < 0.003


def test_cause2_times_follow_plateau_construction():
    sc = SimScenario()
    pop = draw_population(sc, _stream(1, 1), 20_000)
    b = sc.beta_e * pop.x_e + sc.beta_o * pop.x_o + sc.beta3 * pop.x_u
    c2 = pop.cause == 2
    # beyond t0 the cause-2 CDF is 1 - e^-t, so mass above t0 equals e^-t0 on average
    late = np.mean(pop.time[c2] > sc.t0)
    expected = np.mean(1 - cdf_cause2(sc, b[c2], np.full(c2.sum(), sc.t0)))
    assert abs(late - expected) < 0.02


def test_calibration_hits_target_out_of_sample():
    sc = SimScenario(target_censoring=0.5)
    cal = calibrate_censoring(sc, pilot_size=100_000)
    assert 0 < cal.rate < np.inf
    rng = np.random.default_rng(12345)
    pop = draw_population(sc, rng, 100_000)
    frac = np.mean(rng.standard_exponential(100_000) / cal.rate < pop.time)
    assert abs(frac - 0.5) <= 0.01


def test_calibration_degenerate_target():
    cal = calibrate_censoring(SimScenario(target_censoring=0.0))
    assert cal.degenerate and cal.rate == 0.0
    data, _ = generate_replicate(SimScenario(n=50, target_censoring=0.0), 0, 0.0)
    assert not data.is_censored.any()


def test_replicates_reproducible_and_independent_of_workers():
    sc = SimScenario(n=200, reps=6, seed=4)
    a = run_monte_carlo(sc, workers=1, rate=0.5)
    b = run_monte_carlo(sc, workers=2, rate=0.5)
    np.testing.assert_array_equal(a.estimates("iv"), b.estimates("iv"))
    np.testing.assert_array_equal(a.ses("naive"), b.ses("naive"))
    d1, _ = generate_replicate(sc, 3, 0.5)
    d2, _ = generate_replicate(sc, 3, 0.5)
    assert d1.digest() == d2.digest()


def test_summary_accounting():
    est = np.array([0.4, 0.6, np.nan, 0.5])
    se = np.array([0.1, 0.1, np.nan, 0.1])
    s = summarize(est, se, 0.5)
    assert s.successes + s.failures == 4
    assert 0 <= s.coverage <= 1
    assert s.bias == pytest.approx(0.0)


def test_logistic_default():
    sc = SimScenario.logistic_default()
    assert sc.n == 986 and sc.link == "logistic"
    pop = draw_population(sc, _stream(2, 2), 50_000)
    assert set(np.unique(pop.x_e)) <= {0.0, 1.0}
    assert 0.1 < pop.x_e.mean() < 0.3


def test_unreachable_target_raises():
    with pytest.raises(SimulationError):
        calibrate_censoring(SimScenario(target_censoring=0.999999), pilot_size=2000)
