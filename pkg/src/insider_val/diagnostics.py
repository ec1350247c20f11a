"""Arbitrage diagnostics for the insider market.

NFLVR holds for the enlarged filtration exactly when ``E[Z_T / q^L_T] = 1``;
the shortfall measures how much riskless profit the signal unlocks.  The
martingale tests are plain z-tests on path means (and on binned
increments) used to check the density processes and deflators empirically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .densities import DensityFamily
from .errors import ConsistencyError, InapplicableError, InvalidParameterError
from .mcsim import RngPolicy, tree_mean_stderr

DEFAULT_Z = 4.0
NFLVR_MARGIN = 1e-3
CLOSED_TOL = 1e-12
DEFLATOR_FLOOR = 1e-300


@dataclass
class ArbReport:
    """Estimates of ``E[1/q^L_T]`` and ``E[Z_T/q^L_T]`` with the resulting verdict."""

    model_id: str
    method: str
    e_inv_qT: float
    e_inv_qT_stderr: float
    e_Z_over_qT: float
    e_Z_over_qT_stderr: float
    n_paths: int = 0
    z_threshold: float = DEFAULT_Z
    verdict: str = ""
    opt_arb_profit: float = math.nan
    opt_arb_profit_stderr: float = 0.0
    floor_hits: int = 0

    @property
    def nflvr(self) -> bool | None:
        """``True``/``False`` for a firm verdict, ``None`` when inconclusive."""
        return {"nflvr": True, "arbitrage": False}.get(self.verdict)


def insider_deflator(family: DensityFamily, bundle, j: int, signal=None):
    """``Z_t / q^L_t`` at grid index ``j`` and the number of paths where ``q`` was floored.

    ``q^L_t`` is positive on every simulated path in theory; values below
    ``1e-300`` are floored and counted rather than allowed to produce
    infinities.
    """
    L = family.signal_value(bundle) if signal is None else signal
    q = np.asarray(family.q(L, bundle, j), dtype=float)
    hits = int(np.count_nonzero(q < DEFLATOR_FLOOR))
    return bundle.z[:, j] / np.maximum(q, DEFLATOR_FLOOR), hits


def expected_inverse_density(family: DensityFamily, method: str = "auto", n_paths: int = 100_000,
                             rng: RngPolicy | None = None, workers: int = 1,
                             z_threshold: float = DEFAULT_Z) -> ArbReport:
    """``E[1/q^L_T]`` in closed form (discrete, ``Q = P``) or by Monte Carlo.

    The closed form is ``sum_x lambda_x P(q^x_T > 0)``.  The Monte Carlo
    route simulates the terminal state exactly, so a single step suffices.
    """
    if method not in ("auto", "closed", "mc"):
        raise InvalidParameterError(f"unknown method {method!r}")
    if method != "mc":
        try:
            sig = family.signal
            if not (sig.is_discrete and family.q_equals_p):
                raise InapplicableError("closed form needs a discrete signal and Q = P")
            pos = np.array([family.p_positive_terminal(x) for x in sig.atoms])
            e = float(np.dot(sig.probs, pos))
            rep = ArbReport(family.model_id, "closed-form", e, 0.0, e, 0.0, z_threshold=z_threshold)
            return _finish(rep)
        except InapplicableError:
            if method == "closed":
                raise
    rng = RngPolicy(0) if rng is None else rng
    bundle = family.simulate(family.grid_for(), rng, np.arange(n_paths), workers)
    zg, hits = insider_deflator(family, bundle, -1)
    inv_q = zg / bundle.z[:, -1]
    m1, s1 = tree_mean_stderr(inv_q)
    m2, s2 = tree_mean_stderr(zg)
    rep = ArbReport(family.model_id, "monte-carlo", m1, s1, m2, s2, n_paths=n_paths,
                    z_threshold=z_threshold, floor_hits=hits)
    return _finish(rep)


def _finish(rep: ArbReport) -> ArbReport:
    rep.verdict = nflvr_verdict(rep, rep.z_threshold)
    rep.opt_arb_profit = optimal_arbitrage_profit(rep)
    rep.opt_arb_profit_stderr = rep.e_Z_over_qT_stderr / rep.e_Z_over_qT ** 2
    return rep


def nflvr_verdict(report: ArbReport, z_threshold: float = DEFAULT_Z, margin: float = NFLVR_MARGIN) -> str:
    """Classify a report as ``"nflvr"``, ``"arbitrage"`` or ``"inconclusive"``.

    Exact estimates (closed form, or zero standard error) are compared with 1
    directly.  A Monte Carlo estimate signals arbitrage when it sits more
    than ``z_threshold`` standard errors below 1, and supports NFLVR only
    when its upper confidence shortfall ``(1 - e) + z se`` is within
    ``margin``; anything in between is inconclusive.

    Raises
    ------
    ConsistencyError
        If the estimate exceeds 1 by more than five standard errors, which a
        supermartingale cannot do.
    """
    e, se = report.e_Z_over_qT, report.e_Z_over_qT_stderr
    if report.method == "closed-form" or se == 0.0:
        if e > 1.0 + CLOSED_TOL:
            raise ConsistencyError(f"E[Z_T/q^L_T] = {e!r} exceeds 1")
        return "nflvr" if abs(1.0 - e) <= CLOSED_TOL else "arbitrage"
    if e > 1.0 + 5.0 * se:
        raise ConsistencyError(f"E[Z_T/q^L_T] = {e:.6g} +- {se:.2g} exceeds 1 by more than 5 standard errors")
    if (1.0 - e) / se >= z_threshold:
        return "arbitrage"
    if (1.0 - e) + z_threshold * se <= margin:
        return "nflvr"
    return "inconclusive"


def optimal_arbitrage_profit(report: ArbReport) -> float:
    """``1 / E[Z_T/q^L_T]``: what one unit of initial capital can be turned into riskless."""
    if not report.e_Z_over_qT > 0:
        raise InvalidParameterError("E[Z_T/q^L_T] must be positive")
    return 1.0 / report.e_Z_over_qT


# ---------------------------------------------------------------------------
# Martingale tests
# ---------------------------------------------------------------------------


@dataclass
class MartingaleTestReport:
    label: str
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    z: np.ndarray
    verdict: str
    z_threshold: float
    n_paths: int
    conditional: list = field(default_factory=list)


def _z(mean, se):
    if se > 0:
        return mean / se
    return 0.0 if mean == 0 else math.copysign(math.inf, mean)


def martingale_test(samples, times, label: str = "X", z_threshold: float = DEFAULT_Z,
                    min_paths: int = 1000, n_bins: int = 8, conditional_pairs=None,
                    min_effect: float = 0.01) -> MartingaleTestReport:
    """Test ``E[X_t] = X_0`` at every grid time, plus binned increments.

    Parameters
    ----------
    samples : array (n_paths, n_times)
        Process values along each path.
    conditional_pairs : list of (s, t) index pairs, optional
        For each pair the increments ``X_t - X_s`` are grouped into
        ``n_bins`` quantile bins of ``X_s`` and each bin mean is tested
        against zero.  Defaults to ``[(mid, last)]``.
    min_effect : float
        A bin only counts against the martingale hypothesis when its mean
        increment also exceeds ``min_effect * E|X_0|``.  Bins of small
        ``X_s`` for a density-type process mostly see a small drop and very
        rarely a large jump; with the jump absent from the sample both the
        mean and its standard error are biased low and the z-score alone
        would cry wolf.

    Notes
    -----
    A z-score below ``-z_threshold`` anywhere means a downward drift
    (strict supermartingale); above ``+z_threshold`` means the sample is not
    even a supermartingale.  Columns with zero variance are compared
    exactly.
    """
    x = np.asarray(samples, dtype=float)
    n, m = x.shape
    if n < min_paths:
        raise InvalidParameterError(f"martingale_test needs at least {min_paths} paths, got {n}")
    base = x[:, :1]
    means, ses, zs = np.zeros(m), np.zeros(m), np.zeros(m)
    for j in range(m):
        mu, se = tree_mean_stderr(x[:, j] - base[:, 0])
        means[j], ses[j], zs[j] = mu, se, _z(mu, se)
    if conditional_pairs is None:
        conditional_pairs = [(m // 2, m - 1)] if m > 2 else []
    cond = []
    scale = float(np.mean(np.abs(x[:, 0])))
    for s, t in conditional_pairs:
        xs, inc = x[:, s], x[:, t] - x[:, s]
        edges = np.unique(np.quantile(xs, np.linspace(0, 1, n_bins + 1)[1:-1]))
        bins = np.searchsorted(edges, xs, side="right")
        for b in np.unique(bins):
            sel = inc[bins == b]
            if sel.size < 2:
                continue
            mu, se = tree_mean_stderr(sel)
            cond.append({"s": float(times[s]), "t": float(times[t]), "bin": int(b),
                         "n": int(sel.size), "mean": mu, "stderr": se, "z": _z(mu, se),
                         "material": bool(abs(mu) > min_effect * scale)})
    cz = np.array([c["z"] for c in cond if c["material"]])
    all_z = np.concatenate([zs, cz]) if cz.size else zs
    if np.any(all_z < -z_threshold):
        verdict = "strict-supermartingale-detected"
    elif np.any(all_z > z_threshold):
        verdict = "inconsistent"
    else:
        verdict = "consistent-with-martingale"
    return MartingaleTestReport(label, np.asarray(times, float), means, ses, zs, verdict, z_threshold, n, cond)


def martingale_battery(family: DensityFamily, n_paths: int, rng: RngPolicy, n_steps: int = 64,
                       atoms=None, z_threshold: float = DEFAULT_Z, workers: int = 1) -> list[MartingaleTestReport]:
    """Mean-constancy tests for ``q^x`` (fixed ``x``), ``1/q^L`` and the asset price.

    ``q^x`` and ``S`` should pass; ``1/q^L`` drops at ``T`` whenever the
    signal yields arbitrage.
    """
    grid = family.grid_for(n_steps=n_steps)
    bundle = family.simulate(grid, rng, np.arange(n_paths), workers)
    times = bundle.times
    out = []
    if atoms is None:
        atoms = family.signal.atoms if family.is_discrete else [0.25, 0.5, 0.75]
    for x in atoms:
        qx = np.stack([family.q(x, bundle, j) for j in range(times.size)], axis=1)
        out.append(martingale_test(qx, times, f"q^{x:g}", z_threshold))
    L = family.signal_value(bundle)
    inv = np.stack([insider_deflator(family, bundle, j, L)[0] / bundle.z[:, j] for j in range(times.size)], axis=1)
    out.append(martingale_test(inv, times, "1/q^L", z_threshold))
    for a in range(bundle.s.shape[2]):
        out.append(martingale_test(bundle.s[:, :, a] * bundle.z, times, f"Z S^{a + 1}", z_threshold))
    return out
