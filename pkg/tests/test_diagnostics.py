import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from insider_val.densities import (
    GBMBinaryFamily,
    PoissonDiffFamily,
    ReflectionUniformFamily,
    independent_signal,
    poisson_diff_pmf,
)
from insider_val.diagnostics import (
    ArbReport,
    expected_inverse_density,
    insider_deflator,
    martingale_battery,
    martingale_test,
    nflvr_verdict,
    optimal_arbitrage_profit,
)
from insider_val.errors import ConsistencyError, InvalidParameterError
from insider_val.mcsim import RngPolicy, TimeGrid, simulate_gbm


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.99))
def test_binary_arbitrage_coefficient_closed_form(r):
    # E[1/q^L_T] = sum_x lambda_x^2 for a signal that is a function of the terminal state
    rep = expected_inverse_density(GBMBinaryFamily(r=r), "closed")
    assert rep.e_inv_qT == pytest.approx(r * r + (1 - r) ** 2, abs=1e-14)
    assert rep.verdict == "arbitrage"
    assert rep.opt_arb_profit == pytest.approx(1 / (r * r + (1 - r) ** 2), rel=1e-13)


def test_poisson_arbitrage_coefficient_is_sum_of_squares():
    rep = expected_inverse_density(PoissonDiffFamily(T=1.0), "closed")
    xs = np.arange(-40, 41)
    assert rep.e_inv_qT == pytest.approx(float(np.sum(poisson_diff_pmf(xs, 1.0) ** 2)), abs=1e-13)


def test_monte_carlo_matches_closed_form():
    fam = GBMBinaryFamily(r=0.3)
    mc = expected_inverse_density(fam, "mc", n_paths=20_000, rng=RngPolicy(3))
    assert abs(mc.e_inv_qT - 0.58) < 4 * mc.e_inv_qT_stderr
    assert mc.floor_hits == 0


def test_reflection_auto_falls_back_to_monte_carlo():
    fam = ReflectionUniformFamily(T=1.0)
    rep = expected_inverse_density(fam, "auto", n_paths=20_000, rng=RngPolicy(4))
    assert rep.method == "monte-carlo"
    assert abs(rep.e_inv_qT - fam.expected_inverse_density_quadrature()) < 4 * rep.e_inv_qT_stderr
    with pytest.raises(Exception):
        expected_inverse_density(fam, "closed")


def test_independent_signal_is_nflvr():
    rep = expected_inverse_density(independent_signal(), "closed")
    assert rep.verdict == "nflvr" and rep.nflvr is True and rep.opt_arb_profit == 1.0
    mc = expected_inverse_density(independent_signal(), "mc", n_paths=2000, rng=RngPolicy(1))
    assert mc.verdict == "nflvr"


def _rep(e, se, method="monte-carlo"):
    return ArbReport("x", method, e, se, e, se)


def test_verdict_classification():
    assert nflvr_verdict(_rep(0.9, 0.01)) == "arbitrage"
    assert nflvr_verdict(_rep(0.9999, 0.0001)) == "nflvr"
    assert nflvr_verdict(_rep(0.99, 0.01)) == "inconclusive"
    with pytest.raises(ConsistencyError):
        nflvr_verdict(_rep(1.1, 0.01))
    with pytest.raises(ConsistencyError):
        nflvr_verdict(_rep(1.0 + 1e-9, 0.0, "closed-form"))


def test_optimal_profit_requires_positive_mass():
    with pytest.raises(InvalidParameterError):
        optimal_arbitrage_profit(_rep(0.0, 0.0))


def test_insider_deflator_counts_floor_hits():
    fam = GBMBinaryFamily(r=0.5)
    b = fam.simulate(TimeGrid.uniform(1.0, 2), RngPolicy(0), np.arange(200))
    wrong = 1 - fam.signal_value(b)
    zg, hits = insider_deflator(fam, b, -1, wrong)
    assert hits == 200 and np.all(np.isfinite(zg))


def test_martingale_test_constant_and_drift():
    times = np.linspace(0, 1, 5)
    const = np.ones((2000, 5))
    rep = martingale_test(const, times)
    assert rep.verdict == "consistent-with-martingale" and np.all(rep.z == 0)
    rng = np.random.default_rng(0)
    drift = 1 - 0.2 * times + 0.01 * rng.standard_normal((2000, 5))
    assert martingale_test(drift, times).verdict == "strict-supermartingale-detected"
    assert martingale_test(2 - drift, times).verdict == "inconsistent"
    with pytest.raises(InvalidParameterError):
        martingale_test(const[:10], times)


def test_martingale_test_on_simulated_prices():
    b = simulate_gbm(0.4, 1.0, TimeGrid.uniform(1.0, 16), RngPolicy(8), np.arange(20_000))
    rep = martingale_test(b.s[:, :, 0], b.times, "S")
    assert rep.verdict == "consistent-with-martingale"


def test_martingale_test_catches_state_dependent_drift():
    # zero unconditional drift, but increments depend on the state at the midpoint
    rng = np.random.default_rng(1)
    x0 = np.ones(20_000)
    x1 = 1 + rng.standard_normal(20_000)
    x2 = x1 + 0.3 * np.sign(x1 - 1) + 0.05 * rng.standard_normal(20_000)
    x = np.stack([x0, x1, x2], axis=1)
    rep = martingale_test(x, np.array([0.0, 0.5, 1.0]), conditional_pairs=[(1, 2)])
    assert abs(rep.z[-1]) < 4
    assert rep.verdict != "consistent-with-martingale"


def test_battery_binary_signal():
    reps = {r.label: r for r in martingale_battery(GBMBinaryFamily(r=0.3), 20_000, RngPolicy(2), n_steps=16)}
    assert reps["q^0"].verdict == "consistent-with-martingale"
    assert reps["q^1"].verdict == "consistent-with-martingale"
    assert reps["Z S^1"].verdict == "consistent-with-martingale"
    assert reps["1/q^L"].verdict == "strict-supermartingale-detected"
    assert reps["1/q^L"].mean[-1] == pytest.approx(0.58 - 1, abs=4 * reps["1/q^L"].stderr[-1])
