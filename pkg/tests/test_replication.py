import math

import numpy as np
import pytest

from insider_val.densities import GBMBinaryFamily
from insider_val.errors import DomainError, InapplicableError, InvalidParameterError
from insider_val.mcsim import RngPolicy, TimeGrid
from insider_val.replication import (
    StrategyFn,
    guard_index,
    integrate_strategy,
    replication_rows,
    run_replication,
    tracking_error,
    universal_strategy,
    universal_strategy_gbm,
    universal_wealth,
)


@pytest.fixture(scope="module")
def half():
    fam = GBMBinaryFamily(r=0.5, sigma=0.3)
    bundle = fam.simulate(TimeGrid.uniform(1.0, 1024), RngPolicy(21), np.arange(300))
    return fam, bundle


def test_zero_and_buy_and_hold_telescope(half):
    _, b = half
    flat = integrate_strategy(b, StrategyFn("zero", lambda st: 0.0), 0.7)
    assert np.all(flat.wealth == 0.7)
    hold = integrate_strategy(b, StrategyFn("hold", lambda st: 1.0), 0.7, delta_guard=0.25)
    g = guard_index(b.grid, 0.25)
    np.testing.assert_allclose(hold.wealth[:, -1], 0.7 + b.s[:, g, 0] - b.s[:, 0, 0], atol=1e-12)
    assert np.all(hold.wealth[:, g:] == hold.wealth[:, g:g + 1])


def test_strategy_only_sees_left_endpoint(half):
    _, b = half
    seen = []

    def spy(st):
        seen.append(st.t)
        return 0.0

    integrate_strategy(b, StrategyFn("spy", spy), 1.0, delta_guard=0.0)
    assert seen == list(b.times[:-1])


def test_universal_strategy_examples():
    far = universal_strategy_gbm(1.0, 0.2, 0.5, 6.0, 1.0, 1.0, 1)
    assert 0 < far < 1e-14  # exp(-36) kernel
    a = universal_strategy_gbm(1.0, 0.2, 0.5, 0.1, 1.3, 1.0, 1)
    b = universal_strategy_gbm(1.0, 0.2, 0.5, 0.1, 1.3, 1.0, -1)
    assert a == -b
    expected = 1.0 / (0.2 * 1.3) * math.exp(-0.01 / 1.0) / math.sqrt(2 * math.pi * 0.5)
    assert a == pytest.approx(expected, rel=1e-14)
    with pytest.raises(DomainError):
        universal_strategy_gbm(1.0, 0.2, 1.0, 0.1, 1.0, 1.0, 1)


def test_liquidation_near_maturity():
    # |theta| -> 0 as the guard shrinks, on paths with W_T bounded away from 0
    vals = [abs(universal_strategy_gbm(1.0, 0.2, 1.0 - d, 0.15, 1.0, 1.0, 1)) for d in (1e-2, 1e-3, 1e-4)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-20


def test_universal_wealth_endpoints(half):
    fam, b = half
    w = universal_wealth(b, 1.0, 0.0, fam).wealth
    np.testing.assert_allclose(w[:, 0], 0.5, atol=1e-15)
    np.testing.assert_allclose(w[:, -1], 1.0, atol=1e-15)
    wk = universal_wealth(b, 1.0, 1.0, fam).wealth
    np.testing.assert_allclose(wk[:, 0], 0.0, atol=1e-15)
    with pytest.raises(InapplicableError):
        universal_wealth(b, 1.0, 0.0, GBMBinaryFamily(r=0.3))


def test_universal_strategy_requires_symmetric_threshold():
    with pytest.raises(InapplicableError):
        universal_strategy(1.0, GBMBinaryFamily(r=0.3))


def test_nonfinite_position_names_grid_time(half):
    _, b = half
    bad = StrategyFn("bad", lambda st: np.nan if st.j == 5 else 0.0)
    with pytest.raises(DomainError, match=repr(float(b.times[5]))):
        integrate_strategy(b, bad, 1.0)


def test_guard_index():
    g = TimeGrid.uniform(1.0, 100)
    assert guard_index(g, 0.01) == 99
    assert guard_index(g, 0.0) == 100
    with pytest.raises(InvalidParameterError):
        guard_index(g, 1.0)


def test_tracking_error_is_sup_of_rms():
    w = np.array([[0.0, 1.0], [0.0, -1.0]])
    err, rms = tracking_error(w, np.zeros_like(w), 1)
    assert err == 1.0 and rms.tolist() == [0.0, 1.0]


def test_replication_converges_and_tracks():
    fam = GBMBinaryFamily(r=0.5)
    rep = run_replication(fam, 2.0, n_paths=300, n_steps=1024, rng=RngPolicy(4))
    assert rep.steps == [256, 512, 1024]
    assert rep.rms[0] > rep.rms[1] > rep.rms[2]
    assert rep.rms[-1] < 0.05 * 2.0
    assert rep.numeraire_t0 == (1.0, 1.0)
    # the numeraire integrand is (2/v) times the universal one
    assert rep.numeraire_rms[-1] == pytest.approx(rep.rms[-1], rel=1e-9)


def test_rows_shape(half):
    fam, b = half
    sub = b.select([0, 1]).subsample(256)
    rows = list(replication_rows(fam, 1.0, sub))
    assert len(rows) == 2 * sub.times.size
    assert rows[0][2] == 0.5 and rows[0][3] == pytest.approx(0.5)
