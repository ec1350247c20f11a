import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from insider_val.errors import InvalidParameterError
from insider_val.mcsim import (
    PathBundle,
    RngPolicy,
    TimeGrid,
    Volatility,
    max_given_endpoint,
    sample_terminal_max_pair,
    simulate_gbm,
    simulate_poisson_pair,
    simulate_reflection,
    tree_mean_stderr,
    tree_sum,
)


def test_grid_uniform_and_lookup():
    g = TimeGrid.uniform(2.0, 8)
    assert g.n_steps == 8 and g.horizon == 2.0
    assert g.index_of(0.5) == 2
    np.testing.assert_allclose(g.dt, 0.25)
    with pytest.raises(Exception):
        g.index_of(0.3)


def test_grid_rejects_unsorted_and_from_times_sorts():
    with pytest.raises(InvalidParameterError):
        TimeGrid(np.array([0.0, 0.5, 0.4, 1.0]))
    g = TimeGrid.from_times([0.5, 0.25], horizon=1.0)
    np.testing.assert_array_equal(g.times, [0.0, 0.25, 0.5, 1.0])


def test_same_seed_same_paths_any_worker_count():
    g = TimeGrid.uniform(1.0, 16)
    a = simulate_gbm(0.3, 1.0, g, RngPolicy(5), np.arange(200), workers=1)
    b = simulate_gbm(0.3, 1.0, g, RngPolicy(5), np.arange(200), workers=4)
    assert np.array_equal(a.s, b.s) and np.array_equal(a.w, b.w)


def test_path_depends_only_on_its_index():
    g = TimeGrid.uniform(1.0, 16)
    full = simulate_gbm(0.2, 1.0, g, RngPolicy(9), np.arange(50))
    part = simulate_gbm(0.2, 1.0, g, RngPolicy(9), [7, 31])
    assert np.array_equal(full.s[[7, 31]], part.s)


def test_different_seeds_differ():
    g = TimeGrid.uniform(1.0, 4)
    a = simulate_gbm(1.0, 1.0, g, RngPolicy(1), np.arange(10))
    b = simulate_gbm(1.0, 1.0, g, RngPolicy(2), np.arange(10))
    assert not np.array_equal(a.w, b.w)


def test_gbm_matches_closed_form_of_its_driver():
    g = TimeGrid.uniform(1.5, 32)
    sig, s0 = 0.4, 2.0
    b = simulate_gbm(sig, s0, g, RngPolicy(3), np.arange(100))
    exact = s0 * np.exp(sig * b.w - 0.5 * sig * sig * g.times)
    np.testing.assert_allclose(b.s[:, :, 0], exact, rtol=1e-12)


def test_gbm_zero_vol_is_flat():
    b = simulate_gbm(0.0, 1.7, TimeGrid.uniform(1.0, 8), RngPolicy(0), np.arange(5))
    assert np.all(b.s == 1.7)


def test_gbm_is_martingale_and_lognormal():
    b = simulate_gbm(0.5, 1.0, TimeGrid.uniform(1.0, 4), RngPolicy(11), np.arange(40_000))
    m, se = tree_mean_stderr(b.s[:, -1, 0])
    assert abs(m - 1.0) < 4 * se
    logs = np.log(b.s[:, -1, 0])
    assert stats.kstest(logs, "norm", args=(-0.125, 0.5)).pvalue > 1e-3


def test_piecewise_volatility_on_grid():
    vol = Volatility((0.1, 0.3), breaks=(0.5,))
    g = TimeGrid.uniform(1.0, 4)
    np.testing.assert_array_equal(vol.on_grid(g), [0.1, 0.1, 0.3, 0.3])
    with pytest.raises(Exception):
        vol.on_grid(TimeGrid.uniform(1.0, 3))
    with pytest.raises(InvalidParameterError):
        Volatility.coerce(lambda t: t)


def test_piecewise_volatility_terminal_variance():
    vol = Volatility((0.2, 0.6), breaks=(0.5,))
    b = simulate_gbm(vol, 1.0, TimeGrid.uniform(1.0, 4), RngPolicy(6), np.arange(40_000))
    var = 0.5 * 0.04 + 0.5 * 0.36
    assert np.var(np.log(b.s[:, -1, 0])) == pytest.approx(var, rel=0.03)


def test_poisson_counts_mean_and_asset_martingale():
    g = TimeGrid.uniform(2.0, 4)
    b = simulate_poisson_pair(g, 1.0, 3.0, RngPolicy(4), np.arange(30_000))
    for n in (b.n1, b.n2):
        m, se = tree_mean_stderr(n[:, -1])
        assert abs(m - 2.0) < 4 * se
        assert np.all(np.diff(n, axis=1) >= 0)
    for a, s0 in ((0, 1.0), (1, 3.0)):
        m, se = tree_mean_stderr(b.s[:, -1, a])
        assert abs(m - s0) < 4 * se


def test_poisson_pair_components_uncorrelated():
    b = simulate_poisson_pair(TimeGrid.uniform(1.0, 2), 1.0, 1.0, RngPolicy(8), np.arange(30_000))
    r = np.corrcoef(b.n1[:, -1], b.n2[:, -1])[0, 1]
    assert abs(r) < 4 / math.sqrt(30_000)


def test_max_given_endpoint_bridge_law():
    # P(M > m | W_dt = w) = exp(-2 m (m - w) / dt); check against an empirical tail
    u = np.random.default_rng(0).random(200_000)
    m = max_given_endpoint(np.full(u.size, 0.3), 1.0, u)
    assert np.all(m >= 0.3)
    for level in (0.5, 1.0):
        p = math.exp(-2 * level * (level - 0.3))
        assert abs(np.mean(m > level) - p) < 4 * math.sqrt(p * (1 - p) / u.size)


def test_terminal_max_sampler_marginals():
    w, m = sample_terminal_max_pair(2.0, RngPolicy(77), np.arange(50_000))
    assert np.all(m >= np.maximum(w, 0.0))
    assert stats.kstest(m, lambda x: 2 * stats.norm.cdf(np.maximum(x, 0) / math.sqrt(2.0)) - 1).pvalue > 1e-3
    assert stats.kstest(w / math.sqrt(2.0), "norm").pvalue > 1e-3


def test_reflection_running_max_is_monotone():
    b = simulate_reflection(1.0, 1.0, TimeGrid.uniform(1.0, 16), RngPolicy(2), np.arange(500))
    assert np.all(np.diff(b.w_max, axis=1) >= 0)
    assert np.all(b.w_max >= b.w)


def test_subsample_select_concat():
    g = TimeGrid.uniform(1.0, 8)
    b = simulate_gbm(0.2, 1.0, g, RngPolicy(1), np.arange(6))
    sub = b.subsample(2)
    assert sub.grid.n_steps == 4
    np.testing.assert_array_equal(sub.s[:, 1], b.s[:, 2])
    both = PathBundle.concat([b.select([0, 1]), b.select([2, 3, 4, 5])])
    np.testing.assert_array_equal(both.s, b.s)


def test_tree_sum_is_order_fixed_and_exact_on_integers():
    x = np.arange(1, 1001, dtype=float)
    assert tree_sum(x) == 500500.0
    m, se = tree_mean_stderr(np.ones(10))
    assert m == 1.0 and se == 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300))
def test_tree_sum_close_to_fsum(xs):
    assert tree_sum(np.array(xs)) == pytest.approx(math.fsum(xs), abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(0, 10_000))
def test_generator_is_pure_function_of_key(seed, i):
    a = RngPolicy(seed).generator(i).random(3)
    b = RngPolicy(seed).generator(i).random(3)
    c = RngPolicy(seed).generator(i, stream=1).random(3)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_bad_inputs_raise():
    g = TimeGrid.uniform(1.0, 2)
    with pytest.raises(InvalidParameterError):
        simulate_gbm(0.2, -1.0, g, RngPolicy(0), [0])
    with pytest.raises(InvalidParameterError):
        simulate_gbm(0.2, 1.0, g, RngPolicy(0), [-1])
    with pytest.raises(InvalidParameterError):
        sample_terminal_max_pair(0.0, RngPolicy(0), [0])
