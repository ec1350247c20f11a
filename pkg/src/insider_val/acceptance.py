"""Acceptance battery: twelve end-to-end checks at their stated tolerances.

Each ``criterion_*`` function returns ``(id, name, passed, detail)``.  The
battery is shared by the test suite and ``insider-val suite``.  Oracles are
computed independently of the code under test wherever one exists
(explicit arithmetic, scipy's scaled Bessel function, scipy root finders,
scipy's KS test).
"""

from __future__ import annotations

import math
import sys

import numpy as np
from scipy import optimize, special, stats

from .densities import (
    GBMBinaryFamily,
    PoissonDiffFamily,
    ReflectionUniformFamily,
    independent_signal,
    mixing_identity_check,
    poisson_diff_pmf,
    reflection_law_density,
)
from .diagnostics import expected_inverse_density, martingale_battery
from .dualopt import Clock, Utility, ValueFunction, entropy, simulate_for_clock, utility_gain_log
from .mcsim import RngPolicy, TimeGrid, norm_cdf, sample_terminal_max_pair, tree_mean_stderr
from .replication import run_replication
from .valuation import (
    exp_indifference_sides,
    pi_exp,
    pi_generic,
    pi_log,
    pi_power,
    uip_bounds,
    universal_value,
)

N_MC = 100_000


def _h(r):
    return -(1 - r) * math.log(1 - r) - r * math.log(r)


def criterion_1():
    """Universal value at r = 1/2 for log, power and exponential utility."""
    fam = GBMBinaryFamily(r=0.5)
    worst, vals = 0.0, {}
    for v in (1.0, 2.5):
        got = {"log": pi_log(v, fam).pi}
        for p in (0.2, 0.5, 0.8):
            got[f"power{p}"] = pi_power(v, p, fam).pi
        for a in (0.5, 1.0, 2.0):
            got[f"exp{a}"] = pi_exp(v, a, fam).pi
        got["universal"] = universal_value(v, 0.0, fam).pi
        for key, pi in got.items():
            worst = max(worst, abs(pi - v / 2.0))
        vals[v] = got
    q = universal_value(1.0, 0.0, fam).universal_q
    ok = worst <= 1e-12 and q == 2.0
    return 1, "universal value v/2 (r=1/2)", ok, f"max |pi - v/2| = {worst:.2e}, q = {q}"


def criterion_2():
    """Closed-form log value at r = 0.3 and its Monte Carlo root-finding check."""
    fam = GBMBinaryFamily(r=0.3)
    target = 1.0 - 0.7 ** 0.7 * 0.3 ** 0.3
    closed = pi_log(1.0, fam).pi
    mc = pi_generic(1.0, 0.0, fam, Utility.log(), route="mc", n_paths=N_MC, rng=RngPolicy(2002))
    z = (mc.pi - target) / mc.pi_stderr
    ok = abs(closed - target) <= 1e-12 and abs(z) <= 3.0
    return 2, "log value r=0.3 (closed + MC root)", ok, (
        f"closed err {abs(closed - target):.1e}; MC {mc.pi:.5f} +- {mc.pi_stderr:.5f} (z={z:+.2f})")


def criterion_3():
    """Arbitrage coefficient, verdict and optimal arbitrage profit."""
    ok, parts = True, []
    for r, e_true, profit in ((0.3, 0.58, 1 / 0.58), (0.5, 0.5, 2.0)):
        fam = GBMBinaryFamily(r=r)
        cf = expected_inverse_density(fam, "closed")
        mc = expected_inverse_density(fam, "mc", n_paths=N_MC, rng=RngPolicy(3000 + int(r * 10)))
        err = mc.e_inv_qT - e_true
        # at r = 1/2 every path has 1/q^L_T = 1/2, so the estimator has zero variance
        z = err / mc.e_inv_qT_stderr if mc.e_inv_qT_stderr > 0 else (0.0 if abs(err) <= 1e-12 else math.inf)
        ok &= abs(cf.e_inv_qT - e_true) <= 1e-10 and abs(cf.opt_arb_profit - profit) <= 1e-10
        ok &= abs(z) <= 4.0 and cf.verdict == "arbitrage" and mc.verdict == "arbitrage"
        parts.append(f"r={r}: closed {cf.e_inv_qT:.12g}, MC {mc.e_inv_qT:.4f} (z={z:+.2f}), "
                     f"profit {cf.opt_arb_profit:.10g}, {mc.verdict}")
    return 3, "arbitrage coefficient E[1/q^L_T]", bool(ok), "; ".join(parts)


def criterion_4():
    """Poisson model: pmf normalization, arbitrage coefficient, log value, lower bound."""
    T, v = 1.0, 1.0
    xs = np.arange(-40, 41)
    total = float(np.sum(poisson_diff_pmf(xs, T)))
    oracle_pmf = special.ive(np.abs(xs), 2 * T)
    fam = PoissonDiffFamily(T=T)
    e = expected_inverse_density(fam, "closed").e_inv_qT
    e_oracle = float(np.sum(oracle_pmf ** 2))
    H = entropy(fam.signal)
    pl = pi_log(v, fam)
    closed_pi = v * (1.0 - math.exp(-H))
    # Monte Carlo utility gain u^G - u^F at k = 0
    clock = Clock.terminal(T)
    bundle = simulate_for_clock(fam, clock, N_MC, RngPolicy(4004))
    ug = ValueFunction(fam, "G", clock, Utility.log(), "mc", bundle=bundle).solve(v)
    uf = ValueFunction(fam, "F", clock, Utility.log(), "mc", bundle=bundle).solve(v)
    gain, se = ug.value - uf.value, math.hypot(ug.stderr, uf.stderr)
    pi_mc = v * (1.0 - math.exp(-gain))
    pi_se = v * math.exp(-gain) * se
    z = (pi_mc - closed_pi) / pi_se
    lower_ok = True
    for k in (0.0, 1.0):
        lo = (v + k) * (1.0 - float(poisson_diff_pmf(0, T)))
        vals = [pi_generic(v, k, fam, Utility.log()).pi]
        if k == 0:
            vals += [pl.pi, pi_power(v, 0.5, fam).pi]
        lower_ok &= all(p >= lo - 1e-12 for p in vals)
    ok = (abs(total - 1.0) <= 1e-10 and abs(e - e_oracle) <= 1e-4 and abs(pl.pi - closed_pi) <= 1e-12
          and abs(z) <= 3.0 and lower_ok)
    return 4, "Poisson model (T=1)", bool(ok), (
        f"sum pmf - 1 = {total - 1:.1e}; E[1/q] {e:.6f} vs oracle {e_oracle:.6f}; "
        f"pi_log {pl.pi:.6f} vs MC {pi_mc:.6f} +- {pi_se:.6f} (z={z:+.2f}); lower bound ok={lower_ok}")


def criterion_5():
    """Every computed value lies inside the universal bounds."""
    ok, count, dominated = True, 0, 0
    families = [GBMBinaryFamily(r=r) for r in (0.3, 0.5, 0.8)] + [PoissonDiffFamily(T=1.0)]
    utils = [Utility.log(), Utility.power(0.2), Utility.power(0.8), Utility.exp(0.5), Utility.exp(2.0)]
    for fam in families:
        for k in (0.0, 1.0, 2.0):
            for v in (0.5, 1.0, 3.0):
                lo, hi = uip_bounds(v, k, fam)
                if isinstance(fam, GBMBinaryFamily):
                    r = fam.r
                    ok &= abs(lo - (v + k) * min(r, 1 - r)) <= 1e-12 * (v + k)
                    ok &= abs(hi - (v + k) * max(r, 1 - r)) <= 1e-12 * (v + k)
                reps = [pi_generic(v, k, fam, U) for U in utils]
                if k == 0:
                    reps += [pi_log(v, fam), pi_power(v, 0.5, fam), pi_exp(v, 1.0, fam)]
                for rep in reps:
                    if rep.regime == "information-dominates":
                        # no number is computed; the supremum of acceptable prices must still respect the bounds
                        dominated += 1
                        top = rep.price_interval[1]
                        ok &= rep.bound_lo - 1e-12 * (v + k) <= top <= rep.bound_hi + 1e-12 * (v + k)
                    else:
                        count += 1
                        ok &= rep.within_bounds()
    return 5, "universal bounds", bool(ok), (
        f"{count} values inside bounds; {dominated} information-dominated instances (price supremum checked)")


def criterion_6():
    """Small-p limit, monotonicity in p and k, and zero value without arbitrage."""
    fam = GBMBinaryFamily(r=0.3)
    v = 1.0
    lim = abs(pi_power(v, 1e-4, fam).pi - pi_log(v, fam).pi)
    pows = [pi_power(v, p, fam).pi for p in (0.2, 0.5, 0.8)]
    ks = [pi_generic(v, k, fam, Utility.log()).pi for k in (0.0, 1.0, 2.0)]
    hook = independent_signal()
    zeros = [pi_generic(v, k, hook, U).pi for U in (Utility.log(), Utility.power(0.5), Utility.exp(1.0))
             for k in (0.0, 1.0, 2.0)]
    zeros += [pi_log(v, hook).pi, pi_power(v, 0.5, hook).pi, pi_exp(v, 1.0, hook).pi]
    ok = (lim < 1e-3 * v and pows[0] < pows[1] < pows[2] and ks[0] < ks[1] < ks[2]
          and all(z == 0.0 for z in zeros))
    return 6, "limits and monotonicity", bool(ok), (
        f"|pi_pwr(1e-4) - pi_log| = {lim:.2e}; pi_pwr(p) = {np.round(pows, 6).tolist()}; "
        f"pi_log(k) = {np.round(ks, 6).tolist()}; max |pi| without arbitrage = {max(abs(z) for z in zeros):.1e}")


def criterion_7():
    """Exponential indifference equation."""
    ok, parts = True, []
    v = 1.0
    for r in (0.3, 0.5):
        fam = GBMBinaryFamily(r=r)
        for a in (0.5, 1.0, 2.0):
            pi = pi_exp(v, a, fam).pi
            lhs, rhs = exp_indifference_sides(v, pi, a, fam)
            lam = fam.signal.probs
            ref = optimize.brentq(lambda x: math.fsum(lam * np.exp(-a * (v - x) / lam)) - math.exp(-a * v),
                                  0.0, v * (1 - 1e-15), xtol=1e-15, rtol=4 * np.finfo(float).eps)
            ok &= abs(pi - ref) <= 1e-10 and abs(lhs - rhs) <= 1e-9
            if r == 0.5:
                ok &= abs(pi - v / 2) <= 1e-12
            parts.append(f"r={r},a={a}: {pi:.12f}")
    return 7, "exponential indifference value", bool(ok), "; ".join(parts)


def criterion_8():
    """Universal strategy replication and the numeraire identity."""
    v = 1.0
    fam = GBMBinaryFamily(r=0.5)
    rep = run_replication(fam, v, n_paths=1000, n_steps=4096, delta_guard=0.01, rng=RngPolicy(8008))
    q_T = 2.0  # numeraire terminal value q^L_T; its tolerance is 0.02 on that scale
    ok = (rep.rms[-1] < 0.02 * v and rep.floor_ok and rep.rms[0] > rep.rms[1] > rep.rms[2]
          and rep.numeraire_rms[-1] < 0.02 * q_T and rep.numeraire_t0 == (1.0, 1.0))
    return 8, "replication (4096 steps, delta=0.01T)", bool(ok), (
        f"RMS by steps {dict(zip(rep.steps, np.round(rep.rms, 5).tolist()))}; floor {rep.floor:.2e}; "
        f"numeraire RMS {rep.numeraire_rms[-1]:.5f} (q scale 2); terminal gap {rep.terminal_gap:.4f}")


def criterion_9():
    """Martingale battery across the three models."""
    ok, parts = True, []
    runs = [
        (GBMBinaryFamily(r=0.3), None, 9001),
        (PoissonDiffFamily(T=1.0), [-3, -2, -1, 0, 1, 2, 3], 9002),
        (ReflectionUniformFamily(T=1.0), [], 9003),
    ]
    for fam, atoms, seed in runs:
        reps = martingale_battery(fam, N_MC, RngPolicy(seed), n_steps=32, atoms=atoms)
        for rep in reps:
            want = "strict-supermartingale-detected" if rep.label == "1/q^L" else "consistent-with-martingale"
            ok &= rep.verdict == want
            if rep.verdict != want:
                parts.append(f"{fam.model_id} {rep.label}: {rep.verdict}")
        parts.append(f"{fam.model_id}: {len(reps)} processes")
    return 9, "martingale battery", bool(ok), "; ".join(parts)


def criterion_10():
    """Brownian-maximum model: sampler, mixing identity, arbitrage, log value stability."""
    T = 1.0
    _, m = sample_terminal_max_pair(T, RngPolicy(10011), np.arange(N_MC))
    ks = stats.kstest(m, lambda x: 2.0 * norm_cdf(np.maximum(x, 0.0) / math.sqrt(T)) - 1.0)
    fam = ReflectionUniformFamily(T=T)
    zs = []
    for t in (0.0, T / 2):
        for f in (lambda x: np.asarray(x) ** 2, lambda x: np.cos(3.0 * np.asarray(x))):
            zs.append(mixing_identity_check(fam, f, t, N_MC, RngPolicy(10020 + len(zs))).z)
    arb = expected_inverse_density(fam, "mc", n_paths=N_MC, rng=RngPolicy(10030))
    arb_z = (1.0 - arb.e_inv_qT) / arb.e_inv_qT_stderr
    pis = [pi_log(1.0, fam, n_paths=N_MC, rng=RngPolicy(10040 + i)) for i in range(5)]
    w = np.array([1.0 / p.pi_stderr ** 2 for p in pis])
    pooled = float(np.sum(w * np.array([p.pi for p in pis])) / w.sum())
    dev = max(abs(p.pi - pooled) / p.pi_stderr for p in pis)
    ok = ks.pvalue > 0.01 and max(abs(z) for z in zs) <= 4.0 and arb_z > 4.0 and dev <= 3.0
    return 10, "Brownian-maximum model", bool(ok), (
        f"KS p={ks.pvalue:.3f}; mixing z={np.round(zs, 2).tolist()}; E[1/q] {arb.e_inv_qT:.4f} "
        f"(1 - E)/se = {arb_z:.1f}; pi_log pooled {pooled:.5f}, max dev {dev:.2f} se")


def criterion_11():
    """Log utility gain equals the entropy (k = 0) and the leveraged formula (k = 1)."""
    ok, parts = True, []
    v = 1.0
    for fam, seed in ((GBMBinaryFamily(r=0.3), 11001), (PoissonDiffFamily(T=1.0), 11002)):
        clock = Clock.terminal(fam.T)
        bundle = simulate_for_clock(fam, clock, N_MC, RngPolicy(seed))
        fv = ValueFunction(fam, "F", clock, Utility.log(), "mc", bundle=bundle)
        gv = ValueFunction(fam, "G", clock, Utility.log(), "mc", bundle=bundle)
        for k, target in ((0.0, entropy(fam.signal)), (1.0, utility_gain_log(v, 1.0, fam))):
            g, f = gv.solve(v, k), fv.solve(v, k)
            _, se = tree_mean_stderr(g.contributions - f.contributions)
            z = (g.value - f.value - target) / se
            ok &= abs(z) <= 3.0
            parts.append(f"{fam.model_id} k={k:g}: {g.value - f.value:.5f} vs {target:.5f} (z={z:+.2f})")
    h_gbm = _h(0.3)
    ok &= abs(utility_gain_log(v, 1.0, GBMBinaryFamily(r=0.3))
              - (0.7 * math.log(1.3) + 0.3 * math.log(1.7) + h_gbm)) <= 1e-12
    return 11, "utility gain identity", bool(ok), "; ".join(parts)


def criterion_12():
    """Intermediate consumption lowers the log value; chi^G >= chi^F for a random clock."""
    fam = GBMBinaryFamily(r=0.3)
    T = fam.T
    term = pi_log(1.0, fam, Clock.terminal(T)).pi
    unif = pi_log(1.0, fam, Clock.uniform(T, 8)).pi

    def weights(bundle):
        j = bundle.grid.index_of(T / 2)
        w_half = bundle.w[:, j]
        up = (bundle.w[:, -1] >= fam.c).astype(float)
        return np.stack([np.exp(0.5 * w_half), 1.0 + up], axis=1)

    clock = Clock.discrete([T / 2, T], weight_fn=weights)
    rep = pi_log(1.0, fam, clock, n_paths=N_MC, rng=RngPolicy(12012))
    ok = unif < term and rep.chi_G >= rep.chi_F
    return 12, "clock comparison", bool(ok), (
        f"pi_log uniform-8 {unif:.6f} < terminal {term:.6f}; chi_G {rep.chi_G:.5f} >= chi_F {rep.chi_F:.5f}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11, criterion_12]


def format_line(result) -> str:
    cid, name, ok, detail = result
    return f"[{'PASS' if ok else 'FAIL'}] {cid:>2}. {name}: {detail}"


def run_all(verbose: bool = False):
    out = []
    for fn in CRITERIA:
        res = fn()
        out.append(res)
        if verbose:
            print(format_line(res), file=sys.stderr, flush=True)
    return out


if __name__ == "__main__":  # pragma: no cover
    results = run_all(verbose=True)
    sys.exit(0 if all(r[2] for r in results) else 1)
