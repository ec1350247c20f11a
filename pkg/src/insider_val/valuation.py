"""Indifference value of the inside information.

``pi`` solves ``u^{F,k}(v) = u^{G,k}(v - pi)``: the largest amount the
ordinary agent would pay to trade as the insider.  Log and power utilities
at ``k = 0`` have explicit values; the exponential case solves a scalar
equation; :func:`pi_generic` handles any utility and credit line by
bisection on the insider value function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .densities import DensityFamily
from .dualopt import Clock, Utility, ValueFunction, simulate_for_clock
from .errors import InapplicableError, InvalidParameterError, SolverError
from .mcsim import RngPolicy, tree_mean_stderr

UNIVERSAL_RTOL = 1e-9


@dataclass
class ValuationReport:
    pi: float | None
    method: str
    v: float
    k: float
    model_id: str
    u_ordinary: float
    u_insider_at_v_minus_pi: float
    bound_lo: float | None = None
    bound_hi: float | None = None
    universal_q: float | None = None
    chi_F: float | None = None
    chi_G: float | None = None
    pi_stderr: float = 0.0
    u_ordinary_stderr: float = 0.0
    u_insider_stderr: float = 0.0
    regime: str = "priced"
    price_interval: tuple | None = None
    moments: dict = field(default_factory=dict)

    def within_bounds(self, tol: float = 1e-12) -> bool:
        if self.bound_lo is None or self.pi is None:
            return True
        scale = tol * max(1.0, abs(self.v) + self.k)
        return self.bound_lo - scale <= self.pi <= self.bound_hi + scale


def _check_v(v, k=0.0):
    if not (math.isfinite(v) and v > 0):
        raise InvalidParameterError(f"v must be positive, got {v}")
    if not (math.isfinite(k) and k >= 0):
        raise InvalidParameterError(f"k must be nonnegative, got {k}")


def _attach_bounds(rep: ValuationReport, family: DensityFamily, clock: Clock | None) -> ValuationReport:
    if (clock is None or clock.kind == "terminal") and family.q_equals_p:
        try:
            rep.bound_lo, rep.bound_hi = uip_bounds(rep.v, rep.k, family)
        except InapplicableError:
            pass
    return rep


def _value_functions(family, clock, utility, route, n_paths, rng, workers):
    """Ordinary and insider value functions sharing one path set on the Monte Carlo route."""
    clock = Clock.terminal(family.T) if clock is None else clock
    fv = gv = None
    if route != "mc":
        try:
            fv = ValueFunction(family, "F", clock, utility, "closed")
            gv = ValueFunction(family, "G", clock, utility, "closed")
        except InapplicableError:
            if route == "closed":
                raise
    if gv is None:
        bundle = simulate_for_clock(family, clock, n_paths, RngPolicy(0) if rng is None else rng, workers)
        fv = ValueFunction(family, "F", clock, utility, "mc", bundle=bundle)
        gv = ValueFunction(family, "G", clock, utility, "mc", bundle=bundle)
    return fv, gv


def _log_q_integral(gv: ValueFunction):
    """``E[int log q^L dkappa]`` and its standard error (Monte Carlo strata only)."""
    terms = [s.prob * s.integrate(np.log(s.base) - np.log(s.points)) for s in gv.strata]
    if gv.method == "closed-form":
        return math.fsum(terms), 0.0
    contrib = np.zeros(gv.n_paths)
    for s in gv.strata:
        np.add.at(contrib, s.path_ids, (np.log(s.base) - np.log(s.points)) * s.dk)
    return tree_mean_stderr(contrib)


def pi_log(v: float, family: DensityFamily, clock: Clock | None = None, route: str = "auto",
           n_paths: int = 100_000, rng: RngPolicy | None = None, workers: int = 1) -> ValuationReport:
    """``v (1 - exp((chi^G - chi^F - E[int log q^L dkappa]) / E[kappa_T]))`` at ``k = 0``."""
    _check_v(v)
    fv, gv = _value_functions(family, clock, Utility.log(), route, n_paths, rng, workers)
    ek, chi_f = fv.kappa_moments()
    ek_g, chi_g = gv.kappa_moments()
    if chi_g < chi_f - 1e-12 * max(1.0, abs(chi_f)) and gv.method == "closed-form":
        raise SolverError("chi^G < chi^F violates Jensen's inequality", {"chi_F": chi_f, "chi_G": chi_g})
    elq, elq_se = _log_q_integral(gv)
    expo = (chi_g - chi_f - elq) / ek
    pi = -v * math.expm1(expo)
    se = v * math.exp(expo) * elq_se / ek
    uf = fv.solve(v)
    ug = gv.solve(v - pi) if pi < v else None
    rep = ValuationReport(
        pi=pi, method="closed-log", v=v, k=0.0, model_id=family.model_id,
        u_ordinary=uf.value, u_insider_at_v_minus_pi=ug.value if ug else -math.inf,
        chi_F=chi_f, chi_G=chi_g, pi_stderr=se, u_ordinary_stderr=uf.stderr,
        u_insider_stderr=ug.stderr if ug else 0.0,
        moments={"E_kappa_T": ek, "E_int_log_q": elq, "E_int_log_q_stderr": elq_se, "route": gv.method,
                 "n_paths": gv.n_paths},
    )
    return _attach_bounds(rep, family, clock)


def pi_power(v: float, p: float, family: DensityFamily, clock: Clock | None = None, route: str = "auto",
             n_paths: int = 100_000, rng: RngPolicy | None = None, workers: int = 1) -> ValuationReport:
    """Power-utility value ``v (1 - M_F^{(1-p)/p} / (sum_x P(x) M_x^{1-p})^{1/p})`` at ``k = 0``.

    ``M_F = E[int Z^{p/(p-1)} dkappa]`` and ``M_x`` is the same moment of the
    insider deflator conditional on ``L = x``.
    """
    _check_v(v)
    U = Utility.power(p)
    fv, gv = _value_functions(family, clock, U, route, n_paths, rng, workers)
    if gv.continuous:
        raise InapplicableError("power valuation needs a discrete signal")
    e = p / (p - 1.0)
    m_f = math.fsum(s.prob * s.integrate(np.power(s.points, e)) for s in fv.strata)
    mix = math.fsum(s.prob * s.integrate(np.power(s.points, e)) ** (1.0 - p) for s in gv.strata)
    ratio = m_f ** ((1.0 - p) / p) / mix ** (1.0 / p)
    pi = v * (1.0 - ratio)
    uf, ug = fv.solve(v), gv.solve(v - pi)
    rep = ValuationReport(
        pi=pi, method="closed-power", v=v, k=0.0, model_id=family.model_id,
        u_ordinary=uf.value, u_insider_at_v_minus_pi=ug.value,
        u_ordinary_stderr=uf.stderr, u_insider_stderr=ug.stderr,
        moments={"p": p, "M_F": m_f, "sum_P_M_x_pow": mix, "route": gv.method},
    )
    return _attach_bounds(rep, family, clock)


def _root_price(fv: ValueFunction, gv: ValueFunction, v: float, k: float):
    """Bisection for ``pi`` in ``u^G(v - pi) = u^F(v)``; returns ``(pi, regime, uf, ug)``."""
    uf = fv.solve(v, k)
    target = uf.value
    ug_v = gv.solve(v, k)
    tol = 4.0 * np.finfo(float).eps * max(1.0, abs(target))
    if ug_v.value - target <= tol:
        if ug_v.value - target < -max(tol, 4.0 * (uf.stderr + ug_v.stderr)):
            raise SolverError("insider value below ordinary value", {"u_F": target, "u_G": ug_v.value})
        return 0.0, "priced", uf, ug_v
    floor = gv.floor(k)
    at_floor = gv.solve(floor, k, at_floor=True)
    if at_floor.value >= target:
        return None, "information-dominates", uf, at_floor
    lo, hi = floor, v  # u^G(lo) < target <= u^G(hi)
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if gv.solve(mid, k).value >= target:
            hi = mid
        else:
            lo = mid
    w = hi
    return v - w, "priced", uf, gv.solve(w, k)


def pi_exp(v: float, alpha: float, family: DensityFamily, route: str = "auto",
           n_paths: int = 100_000, rng: RngPolicy | None = None, workers: int = 1) -> ValuationReport:
    """Exponential-utility value at ``k = 0`` with terminal clock, by bisection.

    For a discrete ``F_T``-measurable signal the equation reads
    ``exp(-alpha v) = sum_x lambda_x exp(-alpha (v - pi) / lambda_x)``; the
    root is bracketed in ``[0, v)`` and bisected to floating-point
    resolution.
    """
    _check_v(v)
    fv, gv = _value_functions(family, None, Utility.exp(alpha), route, n_paths, rng, workers)
    if gv.continuous:
        raise InapplicableError("exponential valuation needs a discrete signal")
    pi, regime, uf, ug = _root_price(fv, gv, v, 0.0)
    rep = ValuationReport(
        pi=pi, method="root-exp", v=v, k=0.0, model_id=family.model_id,
        u_ordinary=uf.value, u_insider_at_v_minus_pi=ug.value,
        u_ordinary_stderr=uf.stderr, u_insider_stderr=ug.stderr, regime=regime,
        moments={"alpha": alpha, "route": gv.method},
    )
    if gv.method == "monte-carlo":
        rep.pi_stderr = _delta_se(fv, gv, v, 0.0, pi)
    return _attach_bounds(rep, family, None)


def exp_indifference_sides(v: float, pi: float, alpha: float, family: DensityFamily):
    """Both sides ``(exp(-alpha v), sum_x lambda_x exp(-alpha (v-pi)/lambda_x))`` of the exponential equation."""
    lam = family.signal.probs
    return math.exp(-alpha * v), math.fsum(lam * np.exp(-alpha * (v - pi) / lam))


def _delta_se(fv, gv, v, k, pi):
    """Delta-method standard error of a Monte Carlo root: ``se(u^G - u^F) / (u^G)'``."""
    w = v - pi
    sg, sf = gv.solve(w, k), fv.solve(v, k)
    d = sg.contributions - sf.contributions
    _, se = tree_mean_stderr(d)
    h = 1e-4 * max(1.0, abs(w))
    lo = max(w - h, 0.5 * (w + gv.floor(k)))
    slope = (gv.solve(w + h, k).value - gv.solve(lo, k).value) / (w + h - lo)
    return se / slope if slope > 0 else math.inf


def pi_generic(v: float, k: float, family: DensityFamily, utility: Utility, clock: Clock | None = None,
               route: str = "auto", n_paths: int = 100_000, rng: RngPolicy | None = None,
               workers: int = 1) -> ValuationReport:
    """Indifference value for any utility and credit line by bisection.

    The insider value function is increasing in initial capital, so
    ``w -> u^{G,k}(w) - u^{F,k}(v)`` is bisected on ``(v^G_k, v]``.  If
    even the limit at the floor ``v^G_k`` beats the ordinary agent, the
    information dominates and every price below ``v - v^G_k`` is acceptable;
    the report then carries that half-open interval instead of a number.
    """
    _check_v(v, k)
    fv, gv = _value_functions(family, clock, utility, route, n_paths, rng, workers)
    pi, regime, uf, ug = _root_price(fv, gv, v, k)
    rep = ValuationReport(
        pi=pi, method="root-generic", v=v, k=k, model_id=family.model_id,
        u_ordinary=uf.value, u_insider_at_v_minus_pi=ug.value,
        u_ordinary_stderr=uf.stderr, u_insider_stderr=ug.stderr, regime=regime,
        moments={"utility": utility.kind, "p": utility.p, "alpha": utility.alpha, "route": gv.method,
                 "v_floor_G": gv.floor(k), "n_paths": gv.n_paths},
    )
    if regime == "information-dominates":
        rep.price_interval = (0.0, v - gv.floor(k))
    elif gv.method == "monte-carlo" and pi > 0:
        rep.pi_stderr = _delta_se(fv, gv, v, k, pi)
    ek, chi_f = fv.kappa_moments()
    rep.chi_F, rep.chi_G = chi_f, gv.kappa_moments()[1]
    return _attach_bounds(rep, family, clock)


# ---------------------------------------------------------------------------
# Universal value and bounds
# ---------------------------------------------------------------------------


def terminal_q_range(family: DensityFamily):
    """``(q_min, q_max, tail_mass)`` of ``q^L_T`` over the stored support."""
    if not family.q_equals_p:
        raise InapplicableError("bounds need Q = P")
    vals = family.terminal_q_values()
    if vals is None:
        raise InapplicableError(f"{family.model_id}: q^L_T is not essentially bounded in closed form")
    return float(np.min(vals)), float(np.max(vals)), float(family.signal.tail_mass)


def uip_bounds(v: float, k: float, family: DensityFamily):
    """``((v+k)(1 - 1/q_min)^+, (v+k)(1 - 1/q_max))``."""
    _check_v(v, k)
    q_min, q_max, _ = terminal_q_range(family)
    return (v + k) * max(0.0, 1.0 - 1.0 / q_min), (v + k) * (1.0 - 1.0 / q_max)


def universal_value(v: float, k: float, family: DensityFamily, bundle=None) -> ValuationReport:
    """``(v + k)(1 - 1/q)`` when ``q^L_T`` equals a constant ``q``.

    The constancy is checked on the closed-form support, or on the supplied
    simulated paths.
    """
    _check_v(v, k)
    if not family.q_equals_p:
        raise InapplicableError("universal value needs Q = P")
    if bundle is not None:
        vals = np.asarray(family.q(family.signal_value(bundle), bundle, -1), dtype=float)
    else:
        vals = family.terminal_q_values()
        if vals is None:
            raise InapplicableError("universal value inapplicable: q^L_T has no closed-form support")
    q_min, q_max = float(np.min(vals)), float(np.max(vals))
    if q_max - q_min > UNIVERSAL_RTOL * q_max:
        raise InapplicableError(f"universal value inapplicable: q^L_T ranges over [{q_min:.6g}, {q_max:.6g}]")
    q = q_max
    pi = (v + k) * (1.0 - 1.0 / q)
    rep = ValuationReport(pi=pi, method="universal", v=v, k=k, model_id=family.model_id,
                          u_ordinary=math.nan, u_insider_at_v_minus_pi=math.nan, universal_q=q)
    return _attach_bounds(rep, family, None)
