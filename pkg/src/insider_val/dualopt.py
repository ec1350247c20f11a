"""Optimal consumption with a credit line via convex duality.

For information level ``H`` (``"F"`` public, ``"G"`` insider) with state-price
deflator ``Z^H`` (``Z`` or ``Z/q^L``), the optimal plan is
``c_t = I(t, Lambda Z^H_t)`` where the multiplier ``Lambda`` is fixed per
``H_0``-stratum by the budget

    E[ int Z^H c dkappa | H_0 ] = v + k (1 - E[Z^H_T | H_0]).

Every expectation the solver needs is an integral of a function of
``Z^H`` against the clock, so a stratum is stored as a flat list of deflator
values and masses.  Closed-form strata come from the exact conditional laws
of :mod:`densities`; Monte Carlo strata come from simulated paths.  The
same solver runs on both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .densities import DensityFamily, SignalSpec, _gl
from .diagnostics import insider_deflator
from .errors import DomainError, InapplicableError, InvalidParameterError, SolverError
from .mcsim import PathBundle, RngPolicy, tree_mean_stderr, tree_sum

MAX_DOUBLINGS = 200
LAMBDA_RTOL = 1e-12
LEBESGUE_NODES = 16


# ---------------------------------------------------------------------------
# Utilities and clocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Utility:
    """Utility ``U`` together with its inverse marginal ``I = (U')^{-1}``.

    Use the constructors :meth:`log`, :meth:`power`, :meth:`exp` and
    :meth:`custom`.  The exponential utility is ``-exp(-alpha c)`` on
    ``c >= 0``, so its ``I`` is clipped at zero.
    """

    kind: str
    U: Callable
    I: Callable
    p: float | None = None
    alpha: float | None = None

    @classmethod
    def log(cls):
        return cls("log", np.log, lambda y: 1.0 / y)

    @classmethod
    def power(cls, p: float):
        if not 0.0 < p < 1.0:
            raise InvalidParameterError(f"power exponent must lie in (0, 1), got {p}")
        return cls("power", lambda c: np.power(c, p) / p, lambda y: np.power(y, 1.0 / (p - 1.0)), p=p)

    @classmethod
    def exp(cls, alpha: float):
        if not alpha > 0:
            raise InvalidParameterError(f"risk aversion must be positive, got {alpha}")

        def inv(y):
            with np.errstate(divide="ignore", over="ignore"):
                return np.maximum(np.log(alpha / np.asarray(y, dtype=float)), 0.0) / alpha

        return cls("exp", lambda c: -np.exp(-alpha * np.asarray(c, dtype=float)), inv, alpha=alpha)

    @classmethod
    def custom(cls, U: Callable, I: Callable):
        """User utility; ``I`` is spot-checked for monotonicity and the Inada limit."""
        y = np.logspace(-6, 6, 49)
        vals = np.asarray(I(y), dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise InvalidParameterError("custom I must be finite and nonnegative on (0, inf)")
        if np.any(np.diff(vals) >= 0):
            raise InvalidParameterError("custom I must be strictly decreasing")
        if not float(I(np.array([1e12]))[0]) <= 1e-3 * (1.0 + float(I(np.array([1.0]))[0])):
            raise InvalidParameterError("custom I does not vanish as y -> infinity")
        return cls("custom", U, I)

    def at_zero(self) -> float:
        """``U(0)`` (possibly ``-inf``), used for the zero-budget limit."""
        if self.kind == "log":
            return -math.inf
        if self.kind == "power":
            return 0.0
        if self.kind == "exp":
            return -1.0
        with np.errstate(divide="ignore"):
            return float(self.U(np.array([0.0]))[0])


@dataclass(frozen=True, eq=False)
class Clock:
    """Consumption clock ``kappa``.

    ``terminal`` puts unit mass at ``T``; ``discrete`` puts ``weights`` at
    ``times`` (or, with ``weight_fn``, path-dependent weights); ``lebesgue``
    is ``total/T dt`` on ``[0, T]``, integrated with Gauss-Legendre nodes.
    """

    kind: str
    times: tuple = ()
    weights: tuple = ()
    weight_fn: Callable | None = None
    total: float = 1.0

    @classmethod
    def terminal(cls, T: float):
        return cls("terminal", (float(T),), (1.0,))

    @classmethod
    def discrete(cls, times: Sequence[float], weights: Sequence[float] | None = None, weight_fn=None):
        times = tuple(float(t) for t in times)
        if weights is None and weight_fn is None:
            raise InvalidParameterError("a discrete clock needs weights or weight_fn")
        if weights is not None:
            weights = tuple(float(w) for w in weights)
            if len(weights) != len(times) or any(not (w > 0 and math.isfinite(w)) for w in weights):
                raise InvalidParameterError("clock weights must be positive, finite and match the times")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidParameterError("clock times must be strictly increasing")
        return cls("discrete", times, weights or (), weight_fn)

    @classmethod
    def uniform(cls, T: float, n: int, total: float = 1.0):
        """``n`` equal weights at ``T/n, 2T/n, ..., T``."""
        return cls.discrete([T * (i + 1) / n for i in range(n)], [total / n] * n)

    @classmethod
    def lebesgue(cls, T: float, total: float = 1.0, nodes: int = LEBESGUE_NODES):
        if not total > 0:
            raise InvalidParameterError("clock mass must be positive")
        x, w = _gl(nodes)
        times = tuple(0.5 * T * (x + 1.0))
        weights = tuple(0.5 * w * total)
        return cls("lebesgue", times, weights, None, float(total))

    @property
    def deterministic(self) -> bool:
        return self.weight_fn is None

    def validate(self, T: float) -> None:
        if any(t < 0 or t > T * (1 + 1e-12) for t in self.times):
            raise InvalidParameterError(f"clock times must lie in [0, {T}]")

    def weights_on(self, bundle: PathBundle) -> np.ndarray:
        """Clock weights per path and clock time, shape ``(n_paths, n_clock)``."""
        if self.weight_fn is None:
            return np.broadcast_to(np.asarray(self.weights, dtype=float), (bundle.n_paths, len(self.times)))
        w = np.asarray(self.weight_fn(bundle), dtype=float)
        if w.shape != (bundle.n_paths, len(self.times)) or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidParameterError("weight_fn must return finite nonnegative (n_paths, n_clock) weights")
        return w


# ---------------------------------------------------------------------------
# Strata
# ---------------------------------------------------------------------------


@dataclass
class Stratum:
    """One ``H_0``-stratum: deflator values and clock masses.

    ``masses`` integrate to ``E[kappa_T | stratum]``;
    ``E[int f(Z^H) dkappa | stratum] = masses @ f(points)``.  Monte Carlo
    strata also record which path each point came from and the raw clock
    weight ``dk`` so per-path contributions can be formed.
    """

    label: float | None
    prob: float
    points: np.ndarray
    masses: np.ndarray
    zT_mean: float
    base: np.ndarray | None = None  # Z at the same points (for log q = log Z - log Z^H)
    path_ids: np.ndarray | None = None
    dk: np.ndarray | None = None

    @property
    def kappa(self) -> float:
        return float(self.masses.sum())

    def integrate(self, values) -> float:
        return float(self.masses @ values)


def conditional_deflator_mean(family: DensityFamily, x) -> float:
    """``E[Z^G_T | L = x] = Q(q^x_T > 0)`` for a discrete signal."""
    if not family.is_discrete:
        raise InapplicableError("conditional deflator means need a discrete signal")
    if not np.any(family.signal.atoms == x):
        raise DomainError(f"{x!r} is not an atom of the signal")
    return float(family.p_positive_terminal(x))


def closed_strata(family: DensityFamily, info: str, clock: Clock) -> list[Stratum]:
    """Exact strata for a discrete signal with ``Q = P`` and a deterministic clock."""
    clock.validate(family.T)
    if not clock.deterministic:
        raise InapplicableError("closed forms need a deterministic clock")
    if not family.q_equals_p:
        raise InapplicableError("closed forms need Q = P")
    times, weights = np.asarray(clock.times), np.asarray(clock.weights)
    if info == "F":
        pts = np.ones(times.size)
        return [Stratum(None, 1.0, pts, weights.copy(), 1.0, base=np.ones(times.size))]
    if info != "G":
        raise InvalidParameterError(f"info must be 'F' or 'G', got {info!r}")
    if not family.is_discrete:
        raise InapplicableError("closed forms need a discrete signal")
    out = []
    for x, lam in zip(family.signal.atoms, family.signal.probs):
        pts, ms = [], []
        for t, w in zip(times, weights):
            vals, wts = family.atom_law(x, float(t))
            pts.append(1.0 / vals)
            ms.append(w * wts)
        pts, ms = np.concatenate(pts), np.concatenate(ms)
        out.append(Stratum(float(x), float(lam), pts, ms, conditional_deflator_mean(family, x), base=np.ones(pts.size)))
    return out


def simulate_for_clock(family: DensityFamily, clock: Clock, n_paths: int, rng: RngPolicy,
                       workers: int = 1, n_steps: int | None = None) -> PathBundle:
    """Paths on a grid through the clock times (and ``T``)."""
    clock.validate(family.T)
    if n_steps is None:
        grid = family.grid_for(clock.times)
    else:
        grid = family.grid_for(n_steps=n_steps)
        for t in clock.times:
            grid.index_of(t)
    return family.simulate(grid, rng, np.arange(n_paths), workers)


def mc_strata(family: DensityFamily, info: str, clock: Clock, bundle: PathBundle,
              signal=None) -> list[Stratum]:
    """Strata estimated from simulated paths (``G``: grouped by realized signal)."""
    idx = [bundle.grid.index_of(t) for t in clock.times]
    dk = clock.weights_on(bundle)
    n = bundle.n_paths
    zf = bundle.z[:, idx]
    rows_all = np.repeat(np.arange(n)[:, None], len(idx), axis=1)
    if info == "F":
        return [Stratum(None, 1.0, zf.ravel(), (dk / n).ravel(), float(tree_mean_stderr(bundle.z[:, -1])[0]),
                        base=zf.ravel(), path_ids=rows_all.ravel(), dk=np.ravel(dk))]
    if info != "G":
        raise InvalidParameterError(f"info must be 'F' or 'G', got {info!r}")
    L = family.signal_value(bundle) if signal is None else np.asarray(signal)
    zg = np.stack([insider_deflator(family, bundle, j, L)[0] for j in idx], axis=1)
    zgT = insider_deflator(family, bundle, -1, L)[0]
    if not family.is_discrete:
        # log utility at k = 0 with a deterministic clock: one multiplier for all paths
        if not clock.deterministic:
            raise InapplicableError("continuous signals need a deterministic clock")
        return [Stratum(None, 1.0, zg.ravel(), (dk / n).ravel(), float(tree_mean_stderr(zgT)[0]),
                        base=zf.ravel(), path_ids=rows_all.ravel(), dk=np.ravel(dk))]
    labels, inv = np.unique(L, return_inverse=True)
    out = []
    for s, x in enumerate(labels):
        rows = np.flatnonzero(inv == s)
        ns = rows.size
        out.append(Stratum(float(x), ns / n, zg[rows].ravel(), (dk[rows] / ns).ravel(),
                           float(tree_mean_stderr(zgT[rows])[0]), base=zf[rows].ravel(),
                           path_ids=rows_all[rows].ravel(), dk=np.ravel(dk[rows])))
    return out


# ---------------------------------------------------------------------------
# Per-stratum solver
# ---------------------------------------------------------------------------


def _bisect_decreasing(h: Callable[[float], float], target: float, start: float = 1.0,
                       rtol: float = LAMBDA_RTOL) -> float:
    """Solve ``h(lam) = target`` for decreasing ``h`` by bisection in ``log lam``."""
    lo = hi = start
    h_lo = h_hi = h(start)
    n = 0
    while h_hi > target:
        hi *= 2.0
        h_hi = h(hi)
        n += 1
        if n > MAX_DOUBLINGS:
            raise SolverError("multiplier bracket expansion failed", {"side": "upper", "last": hi})
    n = 0
    while h_lo < target:
        lo *= 0.5
        h_lo = h(lo)
        n += 1
        if n > MAX_DOUBLINGS:
            raise SolverError("multiplier bracket expansion failed", {"side": "lower", "last": lo})
    if h_lo < h_hi:
        raise SolverError("budget function is not monotone", {"lo": lo, "hi": hi, "h_lo": h_lo, "h_hi": h_hi})
    for _ in range(400):
        if hi - lo <= rtol * hi:
            break
        mid = math.sqrt(lo * hi) if hi / lo > 4.0 else 0.5 * (lo + hi)
        h_mid = h(mid)
        if h_mid > h_lo + 1e-9 * abs(h_lo) + 1e-300 or h_mid < h_hi - 1e-9 * abs(h_hi) - 1e-300:
            raise SolverError("budget function is not monotone", {"lam": mid, "h": h_mid})
        if h_mid >= target:
            lo, h_lo = mid, h_mid
        else:
            hi, h_hi = mid, h_mid
    return 0.5 * (lo + hi)


def solve_stratum(utility: Utility, s: Stratum, b: float, rtol: float = LAMBDA_RTOL):
    """Multiplier, point consumption and per-point utility for budget ``b``.

    Returns ``(lam, consumption, utility_values)``.  A nonpositive budget
    gives the zero-consumption limit (``lam = inf``).
    """
    z, kappa = s.points, s.kappa
    if kappa == 0.0:
        return math.nan, np.zeros_like(z), np.zeros_like(z)
    if b <= 0.0:
        c = np.zeros_like(z)
        return math.inf, c, np.full_like(z, utility.at_zero())
    if utility.kind == "log":
        lam = kappa / b
    elif utility.kind == "power":
        p = utility.p
        M = s.integrate(np.power(z, p / (p - 1.0)))
        lam = b ** (p - 1.0) * M ** (1.0 - p)
    elif utility.kind == "exp" and np.ptp(z) == 0.0:
        a, z0 = utility.alpha, float(z[0])
        lam = (a / z0) * math.exp(-a * b / (kappa * z0))
    else:
        lam = _bisect_decreasing(lambda y: s.integrate(z * utility.I(y * z)), b, start=1.0 / max(b, 1e-300),
                                 rtol=rtol)
    c = np.asarray(utility.I(lam * z), dtype=float)
    with np.errstate(divide="ignore"):
        uvals = np.asarray(utility.U(c), dtype=float)
    if utility.kind == "exp":
        # -(1/alpha)(lam Z ^ alpha) is the same number with no cancellation at c = 0
        uvals = -np.minimum(lam * z, utility.alpha) / utility.alpha
    return lam, c, uvals


# ---------------------------------------------------------------------------
# Problems and value functions
# ---------------------------------------------------------------------------


@dataclass
class Problem:
    family: DensityFamily
    info: str
    v: float
    k: float = 0.0
    clock: Clock | None = None
    utility: Utility = field(default_factory=Utility.log)

    def __post_init__(self):
        if self.info not in ("F", "G"):
            raise InvalidParameterError(f"info must be 'F' or 'G', got {self.info!r}")
        if not (self.k >= 0 and math.isfinite(self.k)):
            raise InvalidParameterError(f"credit line must be nonnegative, got {self.k}")
        if self.clock is None:
            self.clock = Clock.terminal(self.family.T)


@dataclass
class Solution:
    """Solved problem: multipliers, budgets and the optimal expected utility."""

    info: str
    v: float
    k: float
    utility: str
    method: str
    value: float
    stderr: float
    v_floor: float
    multipliers: dict
    budgets: dict
    deflator_means: dict
    probs: dict
    divergent: bool = False
    contributions: np.ndarray | None = None

    def multiplier(self, x=None) -> float:
        return self.multipliers[None if self.info == "F" else float(x)]


class ValueFunction:
    """``w -> u^{H,k}(w)`` for fixed model, information, clock and utility.

    Strata are built once (closed form when ``route`` allows it, else from
    ``bundle`` or a fresh simulation) so repeated evaluations inside root
    searches use common random numbers.
    """

    def __init__(self, family: DensityFamily, info: str, clock: Clock | None, utility: Utility,
                 route: str = "auto", bundle: PathBundle | None = None, n_paths: int = 100_000,
                 rng: RngPolicy | None = None, workers: int = 1, rtol: float = LAMBDA_RTOL):
        self.family, self.info, self.utility, self.rtol = family, info, utility, rtol
        self.clock = Clock.terminal(family.T) if clock is None else clock
        if route not in ("auto", "closed", "mc"):
            raise InvalidParameterError(f"unknown route {route!r}")
        self.strata = None
        if route != "mc" and bundle is None:
            try:
                self.strata = closed_strata(family, info, self.clock)
                self.method = "closed-form"
            except InapplicableError:
                if route == "closed":
                    raise
        if self.strata is None:
            if info == "G" and not family.is_discrete and not (utility.kind == "log"):
                raise InapplicableError("continuous signals are supported for log utility only")
            if bundle is None:
                bundle = simulate_for_clock(family, self.clock, n_paths, RngPolicy(0) if rng is None else rng, workers)
            self.bundle = bundle
            self.strata = mc_strata(family, info, self.clock, bundle)
            self.method = "monte-carlo"
        self.n_paths = None if self.method == "closed-form" else self.bundle.n_paths
        self.continuous = info == "G" and not family.is_discrete

    @property
    def max_deflator_mean(self) -> float:
        return max(s.zT_mean for s in self.strata)

    def floor(self, k: float) -> float:
        """``v^H_k = -k (1 - max_x E[Z^H_T | H_0 = x])``."""
        return -k * (1.0 - self.max_deflator_mean)

    def kappa_moments(self):
        """``(E[kappa_T], sum_s P(s) E[kappa_T|s] log E[kappa_T|s])``."""
        ek = sum(s.prob * s.kappa for s in self.strata)
        chi = sum(s.prob * s.kappa * math.log(s.kappa) for s in self.strata if s.kappa > 0)
        return ek, chi

    def solve(self, v: float, k: float = 0.0, at_floor: bool = False) -> Solution:
        if self.continuous and k > 0:
            raise InapplicableError("credit lines need a discrete signal")
        floor = self.floor(k)
        if not at_floor and not v > floor:
            raise InvalidParameterError(f"initial capital {v} must exceed the floor {floor}")
        lams, budgets, means, probs = {}, {}, {}, {}
        total = 0.0
        contrib = None if self.method == "closed-form" else np.zeros(self.n_paths)
        divergent = False
        parts = []
        for s in self.strata:
            b = v + k * (1.0 - s.zT_mean)
            if at_floor and abs(b) <= 1e-14 * max(1.0, abs(v), k):
                b = 0.0
            lam, c, uvals = solve_stratum(self.utility, s, b, self.rtol)
            if not self.continuous:
                lams[s.label], budgets[s.label], means[s.label], probs[s.label] = lam, b, s.zT_mean, s.prob
            if not np.all(np.isfinite(uvals)):
                divergent = True
            if contrib is not None:
                np.add.at(contrib, s.path_ids, uvals * s.dk)
            parts.append(s.prob * s.integrate(uvals) if s.kappa > 0 else 0.0)
        total = float(math.fsum(parts)) if all(math.isfinite(p) for p in parts) else float(sum(parts))
        se = 0.0
        if contrib is not None:
            if np.all(np.isfinite(contrib)):
                total, se = tree_mean_stderr(contrib)
                divergent = divergent or _dominated_by_one(contrib)
            else:
                total, divergent = -math.inf, True
        return Solution(self.info, v, k, self.utility.kind, self.method, float(total), float(se), floor,
                        lams, budgets, means, probs, divergent, contrib)

    def __call__(self, v: float, k: float = 0.0) -> float:
        return self.solve(v, k).value


def _dominated_by_one(contrib: np.ndarray) -> bool:
    """Heuristic divergence flag: one path carries most of the negative part."""
    neg = np.minimum(contrib, 0.0)
    total = -float(tree_sum(neg))
    return contrib.size >= 1000 and total > 0 and -float(neg.min()) > 0.5 * total


def solve_multiplier(problem: Problem, route: str = "auto", **mc) -> dict:
    """Multipliers ``Lambda^{H,k}(v)`` keyed by stratum (``None`` for ``F``, atom for ``G``)."""
    vf = ValueFunction(problem.family, problem.info, problem.clock, problem.utility, route, **mc)
    return vf.solve(problem.v, problem.k).multipliers


def expected_utility(problem: Problem, route: str = "auto", **mc) -> Solution:
    """Optimal expected utility ``u^{H,k}(v)`` with its solved multipliers."""
    vf = ValueFunction(problem.family, problem.info, problem.clock, problem.utility, route, **mc)
    return vf.solve(problem.v, problem.k)


@dataclass
class ConsumptionPlan:
    """``c_t = I(t, Lambda Z^H_t)`` evaluated on simulated paths."""

    problem: Problem
    multipliers: dict

    def on_paths(self, bundle: PathBundle) -> np.ndarray:
        """Consumption at the clock times, shape ``(n_paths, n_clock)``."""
        fam, clock = self.problem.family, self.problem.clock
        idx = [bundle.grid.index_of(t) for t in clock.times]
        if self.problem.info == "F":
            z = bundle.z[:, idx]
            lam = np.full(bundle.n_paths, self.multipliers[None])
        else:
            L = fam.signal_value(bundle)
            z = np.stack([insider_deflator(fam, bundle, j, L)[0] for j in idx], axis=1)
            lam = np.array([self.multipliers[float(x)] for x in L])
        return np.asarray(self.problem.utility.I(lam[:, None] * z), dtype=float)

    def budget_check(self, bundle: PathBundle):
        """Per-atom Monte Carlo ``E[int Z^H c dkappa | H_0]`` with standard errors."""
        fam, clock = self.problem.family, self.problem.clock
        idx = [bundle.grid.index_of(t) for t in clock.times]
        c = self.on_paths(bundle)
        dk = clock.weights_on(bundle)
        if self.problem.info == "F":
            spend = (bundle.z[:, idx] * c * dk).sum(axis=1)
            return {None: tree_mean_stderr(spend)}
        L = fam.signal_value(bundle)
        z = np.stack([insider_deflator(fam, bundle, j, L)[0] for j in idx], axis=1)
        spend = (z * c * dk).sum(axis=1)
        return {float(x): tree_mean_stderr(spend[L == x]) for x in np.unique(L)}


def optimal_consumption(problem: Problem, multipliers: dict) -> ConsumptionPlan:
    return ConsumptionPlan(problem, multipliers)


# ---------------------------------------------------------------------------
# Entropy and utility gain
# ---------------------------------------------------------------------------


def entropy(signal: SignalSpec) -> float:
    """``-sum_x P(L=x) log P(L=x)`` over the stored atoms.

    For the truncated Poisson law the omitted tail (mass below ``1e-12``
    per atom) is left out.
    """
    if not signal.is_discrete:
        raise InapplicableError("entropy is defined here for discrete signals")
    p = signal.probs
    return float(math.fsum(-p * np.log(p)))


def utility_gain_log(v: float, k: float, family: DensityFamily) -> float:
    """``E[log(1 + (k/v)(1 - E[Z^G_T|L]))] + E[log q^L_T]`` for log utility, terminal clock."""
    if not v > 0:
        raise InvalidParameterError("v must be positive")
    terms = []
    for x, lam in zip(family.signal.atoms, family.signal.probs):
        m = conditional_deflator_mean(family, x)
        vals, wts = family.atom_law(x, family.T)
        terms.append(lam * (math.log1p((k / v) * (1.0 - m)) + float(wts @ np.log(vals))))
    return float(math.fsum(terms))
