import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivsubdist.additive import WeightedRiskSet, time_grid
from ivsubdist.censoring import CensoringSurvival, build_ipcw, fit_km_censoring
from ivsubdist.data import from_arrays
from ivsubdist.errors import CensoringError

import oracles
from conftest import random_dataset


def _data(time, status):
    n = len(time)
    return from_arrays(time, status, np.zeros(n), np.zeros(n))


def test_hand_product_limit():
    G = fit_km_censoring(_data([1.0, 2.0, 3.0], [0, 1, 0]))
    # left-continuous: 1 on [0, 1], 2/3 on (1, 3], 0 after 3
    np.testing.assert_allclose(G(np.array([0.0, 0.5, 1.0])), 1.0)
    np.testing.assert_allclose(G(np.array([1.5, 2.0, 3.0])), 2 / 3)
    np.testing.assert_allclose(G(np.array([3.5])), 0.0)


def test_tied_failure_stays_at_risk():
    # at t=2 both the failure and the censoring count in the risk set: 1 - 1/3
    G = fit_km_censoring(_data([1.0, 2.0, 2.0, 3.0], [1, 1, 0, 2]))
    assert G.risk_counts[0] == 3
    np.testing.assert_allclose(G(2.5), 2 / 3)


def test_no_censoring_gives_unit():
    G = fit_km_censoring(_data([1.0, 2.0, 3.0], [1, 2, 1]))
    assert G.jump_times.shape == (0,)
    np.testing.assert_array_equal(G(np.array([0.0, 1.0, 10.0])), 1.0)
    np.testing.assert_array_equal(CensoringSurvival.unit()(np.array([5.0])), 1.0)


def test_competing_weight_ratio():
    data = _data([0.5, 0.7, 1.0, 2.0, 4.0], [0, 1, 2, 0, 1])
    G = fit_km_censoring(data)
    np.testing.assert_allclose(G(1.0), 0.8)
    np.testing.assert_allclose(G(3.0), 0.4)
    ipcw = build_ipcw(data, G)
    np.testing.assert_allclose(ipcw.at_risk(3.0)[2], 0.5)


def test_weights_for_event_and_censored_subjects():
    data = _data([0.5, 0.7, 1.0, 2.0, 4.0], [0, 1, 2, 0, 1])
    ipcw = build_ipcw(data, fit_km_censoring(data))
    assert ipcw.weight(0.7)[1] == 1.0
    assert ipcw.weight(2.5)[3] == 0.0
    assert ipcw.counting(4.0)[4] == 1.0


def test_zero_survival_before_tau_raises():
    data = _data([1.0, 2.0, 3.0], [0, 1, 0])
    with pytest.raises(CensoringError):
        fit_km_censoring(data, tau=3.5)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(3, 25), ties=st.booleans())
def test_km_matches_product_limit_oracle(seed, n, ties):
    data = random_dataset(seed, n=n, p=0, ties=ties)
    G = fit_km_censoring(data)
    ref = oracles.km_censoring(data.time, data.status)
    probe = np.unique(np.concatenate([data.time, data.time + 1e-9, data.time - 1e-9, [0.0]]))
    probe = probe[probe >= 0]
    np.testing.assert_allclose(G(probe), [ref(t) for t in probe], rtol=0, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(3, 30))
def test_survival_shape(seed, n):
    data = random_dataset(seed, n=n, p=0, ties=True)
    G = fit_km_censoring(data)
    assert G(0.0) == 1.0
    assert np.all(np.diff(G.values) <= 0)
    np.testing.assert_array_equal(G.jump_times, np.unique(data.time[data.is_censored]))
    ipcw = build_ipcw(data, G)
    for t in np.unique(data.time):
        w = ipcw.weight(t)
        assert np.all((w >= 0) & (w <= 1 + 1e-15))
        gone = data.is_censored & (data.time < t)
        assert np.all(w[gone] == 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(3, 30), ties=st.booleans())
def test_weighted_sums_match_dense(seed, n, ties):
    data = random_dataset(seed, n=n, p=1, ties=ties)
    G = fit_km_censoring(data)
    ipcw = build_ipcw(data, G)
    grid, _ = time_grid(ipcw, data.time.max())
    y2 = ipcw.at_risk_matrix(grid) ** 2
    rs = WeightedRiskSet(ipcw, grid)
    f = np.column_stack([np.ones(n), data.exposure])
    h = np.random.default_rng(seed).standard_normal(grid.shape[0])
    np.testing.assert_allclose(rs.column_sums(f), y2 @ f, atol=1e-12)
    np.testing.assert_allclose(rs.row_sums(h), h @ y2, atol=1e-12)
    # also against the loop oracle for Yhat
    ref = np.vstack([oracles.at_risk(data.time, data.status, oracles.km_censoring(data.time, data.status), g)
                     for g in grid])
    np.testing.assert_allclose(y2, ref ** 2, atol=1e-14)
