import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from insider_val.densities import (
    CustomDiscreteFamily,
    GBMBinaryFamily,
    PoissonDiffFamily,
    ReflectionUniformFamily,
    SignalSpec,
    gamma_map,
    gbm_binary_density,
    gbm_binary_law,
    gbm_binary_threshold,
    independent_signal,
    make_family,
    mixing_identity_check,
    poisson_density,
    poisson_diff_law,
    poisson_diff_pmf,
    reflection_density,
    reflection_density_integral,
    reflection_density_terminal,
    reflection_law_density,
    signal_interval,
)
from insider_val.errors import DomainError, InvalidParameterError
from insider_val.mcsim import RngPolicy, TimeGrid

mpmath.mp.dps = 40


def bessel_pmf(x, T):
    return float(mpmath.exp(-2 * T) * mpmath.besseli(abs(x), 2 * T))


# -- binary Brownian signal -------------------------------------------------


def test_threshold_inverts_law():
    for r in (0.05, 0.3, 0.5, 0.9):
        c = gbm_binary_threshold(r, 2.0)
        assert gbm_binary_law(c, 2.0).probs[1] == pytest.approx(r, abs=1e-15)
    assert gbm_binary_threshold(0.5, 1.0) == 0.0


def test_binary_density_at_zero_is_one():
    fam = GBMBinaryFamily(r=0.3)
    q0, q1 = gbm_binary_density(fam.c, fam.r, 0.0, 0.0, 1.0)
    assert q0 == pytest.approx(1.0, abs=1e-15) and q1 == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.0, 0.999), st.floats(-4, 4))
def test_binary_densities_mix_to_one(r, t, w):
    c = gbm_binary_threshold(r, 1.0)
    q0, q1 = gbm_binary_density(c, r, t, w, 1.0)
    assert (1 - r) * q0 + r * q1 == pytest.approx(1.0, abs=1e-12)
    assert q0 >= 0 and q1 >= 0


def test_binary_density_terminal_indicator():
    q0, q1 = gbm_binary_density(0.0, 0.5, 1.0, np.array([-0.1, 0.2]), 1.0)
    np.testing.assert_array_equal(q0, [2.0, 0.0])
    np.testing.assert_array_equal(q1, [0.0, 2.0])
    with pytest.raises(DomainError):
        gbm_binary_density(0.0, 0.5, 1.5, 0.0, 1.0)


def test_binary_atom_law_is_a_probability_law_with_mean_one():
    fam = GBMBinaryFamily(r=0.3)
    for x in (0, 1):
        vals, w = fam.atom_law(x, 0.5)
        assert w.sum() == pytest.approx(1.0, abs=1e-10)
        # E[q^x_t] under P is 1, so E[1/q^x_t | L = x] = sum w / q = 1
        assert np.sum(w / vals) == pytest.approx(1.0, abs=1e-9)


def test_binary_q_on_path_starts_at_one_and_ends_at_inverse_prob():
    fam = GBMBinaryFamily(r=0.3)
    b = fam.simulate(TimeGrid.uniform(1.0, 8), RngPolicy(1), np.arange(100))
    q = fam.q_on_path(b)
    np.testing.assert_allclose(q[:, 0], 1.0)
    L = fam.signal_value(b)
    np.testing.assert_allclose(q[:, -1], np.where(L == 1, 1 / 0.3, 1 / 0.7))


# -- Poisson difference -----------------------------------------------------


@pytest.mark.parametrize("T", [0.05, 1.0, 3.0, 20.0])
def test_skellam_pmf_matches_bessel_oracle(T):
    xs = np.arange(-60, 61)
    got = poisson_diff_pmf(xs, T)
    want = np.array([bessel_pmf(x, T) for x in xs])
    mask = want > 1e-300
    np.testing.assert_allclose(got[mask], want[mask], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 8.0))
def test_skellam_pmf_sums_to_one_and_is_symmetric(T):
    xs = np.arange(-200, 201)
    p = poisson_diff_pmf(xs, T)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(p, p[::-1])


def test_skellam_matches_scipy_distribution():
    xs = np.arange(-10, 11)
    np.testing.assert_allclose(poisson_diff_pmf(xs, 1.5), stats.skellam.pmf(xs, 1.5, 1.5), rtol=1e-10)


def test_poisson_law_truncation():
    law = poisson_diff_law(1.0)
    assert law.countable and law.tail_mass < 1e-12
    assert law.probs.sum() + law.tail_mass == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(-6, 6), st.floats(0.05, 0.95))
def test_poisson_density_chapman_kolmogorov(x, frac):
    # sum_n P(N_t = n) q^x_t(n) = 1 by the convolution of Skellam laws
    T = 1.0
    t = frac * T
    ns = np.arange(-60, 61)
    total = math.fsum(poisson_diff_pmf(ns, t) * poisson_density(x, t, ns, T))
    assert total == pytest.approx(1.0, abs=1e-10)


def test_poisson_density_endpoints():
    assert poisson_density(3, 0.0, 0, 1.0) == pytest.approx(1.0)
    assert poisson_density(2, 1.0, 2, 1.0) == pytest.approx(1 / bessel_pmf(2, 1.0), rel=1e-12)
    assert poisson_density(2, 1.0, 1, 1.0) == 0.0


# -- Brownian maximum with uniform noise ------------------------------------


def test_gamma_map_and_interval_are_inverse():
    z = np.array([0.0, 0.3, 1.0, 5.0])
    a, b = signal_interval(z)
    np.testing.assert_allclose(gamma_map(a), z, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(gamma_map(b), z, rtol=1e-12, atol=1e-15)
    assert gamma_map(0.5) == math.inf
    with pytest.raises(DomainError):
        gamma_map(1.5)


@pytest.mark.parametrize("T", [0.5, 1.0, 2.0])
def test_reflection_law_integrates_to_one(T):
    val = sum(integrate.quad(lambda x: reflection_law_density(x, T), lo, hi, limit=200)[0]
              for lo, hi in ((0.0, 0.5), (0.5, 1.0)))
    assert val == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("x,t,w,m", [(0.2, 0.3, -0.1, 0.05), (0.4, 0.5, 0.2, 0.4),
                                     (0.5, 0.5, 0.1, 0.3), (0.7, 0.8, -0.3, 0.2), (0.9, 0.1, 0.0, 0.0)])
def test_reflection_closed_form_matches_integral(x, t, w, m):
    a = reflection_density(x, t, w, m, 1.0)
    b = reflection_density_integral(x, t, w, m, 1.0)
    assert a == pytest.approx(b, rel=1e-8, abs=1e-12)


def test_reflection_density_at_time_zero_is_one():
    xs = np.linspace(0.01, 0.99, 15)
    np.testing.assert_allclose(reflection_density(xs, 0.0, 0.0, 0.0, 1.0), 1.0, rtol=1e-12)


def test_reflection_density_mixes_to_one():
    # int q^x_t D(x) dx = 1 at any fixed state
    t, w, m = 0.5, -0.2, 0.3
    f = lambda x: reflection_density(x, t, w, m, 1.0) * reflection_law_density(x, 1.0)
    a, b = signal_interval(m)
    pts = sorted({a, b, 0.5})
    val = sum(integrate.quad(f, lo, hi, limit=200)[0] for lo, hi in zip([0.0] + pts, pts + [1.0]))
    assert val == pytest.approx(1.0, abs=1e-7)


def test_reflection_density_approaches_terminal():
    x, w, m = 0.3, 0.1, 0.4
    near = reflection_density(x, 1.0 - 1e-10, w, m, 1.0)
    assert near == pytest.approx(reflection_density_terminal(x, m, 1.0), rel=1e-4)


def test_reflection_expected_inverse_density_against_nested_quad():
    # E[1/q^L_T] = int f_M(m) int_{a(m)}^{b(m)} D(x) dx dm with f_M(m) = 2 phi(m) at T = 1
    def inner(m):
        a, b = signal_interval(m)
        return sum(integrate.quad(lambda x: reflection_law_density(x, 1.0), lo, hi)[0]
                   for lo, hi in ((a, 0.5), (0.5, b)))

    oracle = integrate.quad(lambda m: 2 * stats.norm.pdf(m) * inner(m), 0, np.inf, limit=200)[0]
    fam = ReflectionUniformFamily(T=1.0)
    assert fam.expected_inverse_density_quadrature() == pytest.approx(oracle, abs=1e-8)
    assert oracle < 1


# -- families, mixing identity, validation ----------------------------------


@pytest.mark.parametrize("fam", [GBMBinaryFamily(r=0.3), PoissonDiffFamily(T=1.0)], ids=lambda f: f.model_id)
def test_mixing_identity_discrete(fam):
    rep = mixing_identity_check(fam, lambda x: np.cos(np.asarray(x, float)), fam.T / 2, 20_000, RngPolicy(5))
    assert abs(rep.z) < 4


def test_mixing_identity_reflection_at_zero_is_quadrature():
    fam = ReflectionUniformFamily(T=1.0)
    rep = mixing_identity_check(fam, lambda x: np.asarray(x) ** 2, 0.0, 20_000, RngPolicy(6))
    assert rep.mixed_stderr == pytest.approx(0.0, abs=1e-12)
    assert abs(rep.z) < 4


def test_independent_signal_has_unit_density():
    fam = independent_signal()
    b = fam.simulate(TimeGrid.uniform(1.0, 4), RngPolicy(1), np.arange(1000))
    assert np.all(fam.q(1.0, b, 2) == 1.0)
    assert abs(np.mean(fam.signal_value(b)) - 0.5) < 4 * 0.5 / math.sqrt(1000)


def test_custom_conditional_hook_is_checked():
    bad = lambda bundle, j: np.full((bundle.n_paths, 2), 0.6)
    with pytest.raises(InvalidParameterError):
        CustomDiscreteFamily([0, 1], [0.5, 0.5], cond_prob=bad, signal_fn=lambda b: np.zeros(b.n_paths))


def test_signal_spec_validation():
    with pytest.raises(InvalidParameterError):
        SignalSpec(kind="discrete", atoms=[0, 1], probs=[0.5, 0.4])
    with pytest.raises(InvalidParameterError):
        SignalSpec(kind="discrete", atoms=[0, 1], probs=[1 - 1e-13, 1e-13])
    with pytest.raises(InvalidParameterError):
        SignalSpec(kind="continuous")


def test_make_family():
    assert make_family("gbm-binary", r=0.4).r == 0.4
    with pytest.raises(InvalidParameterError):
        make_family("heston")
