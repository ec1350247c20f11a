import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from insider_val.densities import GBMBinaryFamily, PoissonDiffFamily, ReflectionUniformFamily, independent_signal
from insider_val.dualopt import Clock, Utility, entropy
from insider_val.errors import InapplicableError, InvalidParameterError
from insider_val.mcsim import RngPolicy
from insider_val.valuation import (
    exp_indifference_sides,
    pi_exp,
    pi_generic,
    pi_log,
    pi_power,
    uip_bounds,
    universal_value,
)

SCALAR_U = {
    "log": (Utility.log(), math.log),
    "power": (Utility.power(0.5), lambda c: 2 * math.sqrt(c)),
    "exp": (Utility.exp(1.0), lambda c: -math.exp(-c)),
}


def brentq_price(U, r, v, k):
    # insider with v - pi and credit k, terminal clock: sum_x lambda_x U((v - pi + k (1 - lambda_x)) / lambda_x)
    def gap(pi):
        return sum(lam * U((v - pi + k * (1 - lam)) / lam) for lam in (r, 1 - r)) - U(v)

    lo_pi = v + k * (1 - max(r, 1 - r))  # wealth floor reached
    return optimize.brentq(gap, 0.0, lo_pi * (1 - 1e-12), xtol=1e-14, rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.02, 0.98), st.floats(0.1, 10.0))
def test_log_value_closed_form(r, v):
    rep = pi_log(v, GBMBinaryFamily(r=r))
    assert rep.pi == pytest.approx(v * (1 - (1 - r) ** (1 - r) * r ** r), rel=1e-12)
    assert rep.within_bounds()


@pytest.mark.parametrize("name", sorted(SCALAR_U))
@pytest.mark.parametrize("k", [0.0, 0.3])
def test_generic_root_matches_independent_brentq(name, k):
    util, U = SCALAR_U[name]
    rep = pi_generic(1.0, k, GBMBinaryFamily(r=0.3), util)
    assert rep.regime == "priced"
    assert rep.pi == pytest.approx(brentq_price(U, 0.3, 1.0, k), abs=1e-10)


def test_closed_forms_agree_with_generic_root():
    fam = GBMBinaryFamily(r=0.3)
    assert pi_power(1.0, 0.5, fam).pi == pytest.approx(pi_generic(1.0, 0.0, fam, Utility.power(0.5)).pi, abs=1e-10)
    assert pi_exp(1.0, 1.0, fam).pi == pytest.approx(pi_generic(1.0, 0.0, fam, Utility.exp(1.0)).pi, abs=1e-10)
    clock = Clock.uniform(1.0, 4)
    assert pi_log(1.0, fam, clock).pi == pytest.approx(pi_generic(1.0, 0.0, fam, Utility.log(), clock).pi, abs=1e-10)


def test_power_value_tends_to_log_value():
    fam = GBMBinaryFamily(r=0.3)
    gaps = [abs(pi_power(1.0, p, fam).pi - pi_log(1.0, fam).pi) for p in (1e-2, 1e-3, 1e-4)]
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-4


@pytest.mark.parametrize("alpha", [0.25, 1.0, 4.0])
def test_exp_equation_sides_agree(alpha):
    fam = GBMBinaryFamily(r=0.2)
    pi = pi_exp(2.0, alpha, fam).pi
    lhs, rhs = exp_indifference_sides(2.0, pi, alpha, fam)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_universal_value_and_bounds():
    fam = GBMBinaryFamily(r=0.5)
    assert universal_value(3.0, 1.0, fam).pi == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(InapplicableError):
        universal_value(1.0, 0.0, GBMBinaryFamily(r=0.3))
    lo, hi = uip_bounds(1.0, 1.0, GBMBinaryFamily(r=0.2))
    assert (lo, hi) == pytest.approx((0.4, 1.6), abs=1e-14)
    with pytest.raises(InapplicableError):
        uip_bounds(1.0, 0.0, ReflectionUniformFamily())


def test_universal_value_on_simulated_paths():
    fam = GBMBinaryFamily(r=0.5)
    b = fam.simulate(fam.grid_for(), RngPolicy(1), np.arange(500))
    assert universal_value(1.0, 0.0, fam, bundle=b).pi == pytest.approx(0.5)


def test_poisson_log_value_is_entropy_transform():
    fam = PoissonDiffFamily(T=1.0)
    assert pi_log(2.0, fam).pi == pytest.approx(2.0 * (1 - math.exp(-entropy(fam.signal))), rel=1e-12)


def test_no_information_no_value():
    fam = independent_signal()
    for util in (Utility.log(), Utility.power(0.3), Utility.exp(2.0)):
        for k in (0.0, 1.5):
            assert pi_generic(1.0, k, fam, util).pi == 0.0


def test_information_dominates_regime_reports_interval():
    rep = pi_generic(0.5, 2.0, GBMBinaryFamily(r=0.3), Utility.power(0.8))
    assert rep.regime == "information-dominates" and rep.pi is None
    lo, hi = rep.price_interval
    assert lo == 0.0 and hi == pytest.approx(0.5 + 2.0 * 0.3)


def test_monte_carlo_generic_within_standard_errors():
    fam = GBMBinaryFamily(r=0.3)
    rep = pi_generic(1.0, 1.0, fam, Utility.log(), route="mc", n_paths=20_000, rng=RngPolicy(5))
    exact = pi_generic(1.0, 1.0, fam, Utility.log()).pi
    assert rep.pi_stderr > 0
    assert abs(rep.pi - exact) < 4 * rep.pi_stderr


def test_reflection_log_value_seeds_agree():
    fam = ReflectionUniformFamily(T=1.0)
    a = pi_log(1.0, fam, n_paths=20_000, rng=RngPolicy(1))
    b = pi_log(1.0, fam, n_paths=20_000, rng=RngPolicy(2))
    assert abs(a.pi - b.pi) < 4 * math.hypot(a.pi_stderr, b.pi_stderr)
    assert 0 < a.pi < 1


def test_clock_lowers_log_value():
    fam = GBMBinaryFamily(r=0.3)
    term = pi_log(1.0, fam).pi
    assert pi_log(1.0, fam, Clock.uniform(1.0, 8)).pi < term
    assert pi_log(1.0, fam, Clock.lebesgue(1.0)).pi < term


def test_invalid_capital():
    with pytest.raises(InvalidParameterError):
        pi_log(0.0, GBMBinaryFamily(r=0.3))
    with pytest.raises(InvalidParameterError):
        pi_generic(1.0, -1.0, GBMBinaryFamily(r=0.3), Utility.log())


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.2, 5.0), st.floats(0.0, 3.0))
def test_log_value_within_bounds_and_increasing_in_k(r, v, k):
    fam = GBMBinaryFamily(r=r)
    a = pi_generic(v, k, fam, Utility.log())
    b = pi_generic(v, k + 0.5, fam, Utility.log())
    assert a.within_bounds() and b.within_bounds()
    assert b.pi > a.pi
