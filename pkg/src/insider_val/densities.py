"""Signal laws and conditional density processes ``q^x_t``.

``q^x_t`` is the density of the time-``t`` conditional law of the signal
``L`` with respect to its unconditional law ``lambda``, so that
``P(L in dx | F_t) = q^x_t lambda(dx)``.  Each worked market gets a
:class:`DensityFamily` that knows how to simulate its paths, read the signal
off a path and evaluate ``q`` on path states.  Families are looked up by
``model_id``: ``gbm-binary``, ``poisson-diff``, ``reflection-uniform`` and
``custom-discrete``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import DomainError, InapplicableError, InvalidParameterError
from .mcsim import (
    PathBundle,
    RngPolicy,
    TimeGrid,
    norm_cdf,
    norm_ppf,
    simulate_gbm,
    simulate_poisson_pair,
    simulate_reflection,
    tree_mean_stderr,
)

SQRT2PI = math.sqrt(2.0 * math.pi)
MIN_ATOM_PROB = 1e-12
PMF_REL_TOL = 1e-16
PMF_MAX_TERMS = 500


# ---------------------------------------------------------------------------
# Signal laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SignalSpec:
    """Law of the inside-information variable ``L``.

    Discrete signals list their atoms and probabilities.  A ``countable``
    signal (the Poisson difference) is stored truncated, with the dropped
    mass in ``tail_mass``; the degenerate-atom rule does not apply to it
    because its far atoms are never divided by unless observed.  Continuous
    signals carry a Lebesgue density on ``support``.
    """

    kind: str
    atoms: np.ndarray | None = None
    probs: np.ndarray | None = None
    density: Callable | None = None
    support: tuple[float, float] | None = None
    breakpoints: tuple[float, ...] = ()
    sampler: str = ""
    countable: bool = False
    tail_mass: float = 0.0

    def __post_init__(self):
        if self.kind not in ("discrete", "continuous"):
            raise InvalidParameterError(f"unknown signal kind {self.kind!r}")
        if self.kind == "discrete":
            atoms = np.asarray(self.atoms, dtype=float)
            probs = np.asarray(self.probs, dtype=float)
            if atoms.shape != probs.shape or atoms.ndim != 1 or atoms.size == 0:
                raise InvalidParameterError("atoms and probs must be matching 1-d arrays")
            if np.unique(atoms).size != atoms.size:
                raise InvalidParameterError("signal atoms must be distinct")
            if np.any(probs <= 0):
                raise InvalidParameterError("atom probabilities must be positive")
            if abs(probs.sum() + self.tail_mass - 1.0) > 1e-10:
                raise InvalidParameterError(f"atom probabilities sum to {probs.sum()!r}, not 1")
            if not self.countable and probs.min() < MIN_ATOM_PROB:
                raise InvalidParameterError(
                    f"degenerate signal: atom probability {probs.min():.3g} below {MIN_ATOM_PROB}"
                )
            atoms.setflags(write=False)
            probs.setflags(write=False)
            object.__setattr__(self, "atoms", atoms)
            object.__setattr__(self, "probs", probs)
        elif self.density is None or self.support is None:
            raise InvalidParameterError("continuous signals need a density and a support")

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    def prob(self, x) -> float:
        hit = np.flatnonzero(self.atoms == x)
        if hit.size == 0:
            raise DomainError(f"{x!r} is not an atom of the signal")
        return float(self.probs[hit[0]])


def gbm_binary_law(c: float, T: float) -> SignalSpec:
    """Law of ``L = 1{W_T >= c}``: atoms ``{0, 1}`` with ``P(L=1) = 1 - Phi(c/sqrt(T))``."""
    if not T > 0:
        raise InvalidParameterError(f"T must be positive, got {T}")
    r = float(norm_cdf(-c / math.sqrt(T)))
    return SignalSpec(
        kind="discrete",
        atoms=np.array([0.0, 1.0]),
        probs=np.array([1.0 - r, r]),
        sampler="indicator of W_T >= c",
    )


def gbm_binary_threshold(r: float, T: float) -> float:
    """Threshold ``c`` with ``P(W_T >= c) = r``."""
    if not 0.0 < r < 1.0:
        raise InvalidParameterError(f"r must lie in (0, 1), got {r}")
    return float(math.sqrt(T) * norm_ppf(1.0 - r))


def gbm_binary_density(c, r, t, w_t, T):
    """``(q^0_t, q^1_t)`` for the binary Brownian signal.

    For ``t < T`` these are ``Phi((c - w)/sqrt(T-t)) / (1-r)`` and
    ``Phi((w - c)/sqrt(T-t)) / r``; at ``t = T`` the indicator forms.
    """
    if not 0.0 <= t <= T:
        raise DomainError(f"t={t} outside [0, {T}]")
    w_t = np.asarray(w_t, dtype=float)
    if t == T:
        up = w_t >= c
        return (~up) / (1.0 - r), up / r
    arg = (w_t - c) / math.sqrt(T - t)
    return norm_cdf(-arg) / (1.0 - r), norm_cdf(arg) / r


# ---------------------------------------------------------------------------
# Poisson difference (Skellam) law
# ---------------------------------------------------------------------------


@lru_cache(maxsize=65536)
def _log_pmf_scalar(a: int, T: float) -> float:
    """``log(e^{-2T} sum_k T^{2k+a} / (k! (k+a)!))`` for ``a = |x|``."""
    if T == 0.0:
        return 0.0 if a == 0 else -math.inf
    log_t = math.log(T)
    log_first = a * log_t - math.lgamma(a + 1.0)
    # Sum the series relative to its first term; rescale if it grows large.
    total, term, log_scale = 1.0, 1.0, 0.0
    tt = T * T
    for k in range(PMF_MAX_TERMS - 1):
        ratio = tt / ((k + 1.0) * (k + 1.0 + a))
        term *= ratio
        total += term
        if total > 1e280:
            log_scale += math.log(total)
            term /= total
            total = 1.0
        if ratio < 1.0 and term < PMF_REL_TOL * total:
            break
    return -2.0 * T + log_first + log_scale + math.log(total)


def _log_pmf(x, T: float) -> np.ndarray:
    x = np.asarray(x)
    if x.size == 0:
        return np.zeros(x.shape)
    a = np.abs(np.rint(x)).astype(np.int64)
    uniq, inv = np.unique(a, return_inverse=True)
    vals = np.array([_log_pmf_scalar(int(u), float(T)) for u in uniq])
    return vals[inv].reshape(x.shape)


def poisson_diff_pmf(x, T: float):
    """``P(N^1_T - N^2_T = x)`` for independent unit-rate Poisson processes.

    Evaluates ``e^{-2T} I_{|x|}(2T)`` from its power series, truncated once a
    term drops below ``1e-16`` of the running sum (at most 500 terms), with
    the leading factor kept in log space.
    """
    if not T > 0:
        raise InvalidParameterError(f"T must be positive, got {T}")
    out = np.exp(_log_pmf(x, T))
    return float(out) if np.ndim(out) == 0 else out


def poisson_density(x, t: float, n_t, T: float):
    """``q^x_t = P(L = x | F_t) / P(L = x)`` with ``L = N^1_T - N^2_T``.

    For ``t < T`` the numerator is the same Bessel series evaluated for the
    remaining increment ``x - n_t`` over ``T - t``; at ``t = T`` this is
    ``1{n_T = x} / P(L = x)``.
    """
    if not T > 0:
        raise InvalidParameterError(f"T must be positive, got {T}")
    if not 0.0 <= t <= T:
        raise DomainError(f"t={t} outside [0, {T}]")
    x = np.asarray(x)
    n_t = np.asarray(n_t)
    if t == T:
        out = (x == n_t) * np.exp(-_log_pmf(x, T))
    else:
        out = np.exp(_log_pmf(x - n_t, T - t) - _log_pmf(x, T))
    return float(out) if np.ndim(out) == 0 else out


def poisson_diff_law(T: float, min_prob: float = MIN_ATOM_PROB) -> SignalSpec:
    """Skellam law truncated to the atoms with probability at least ``min_prob``."""
    xs = np.arange(0, 2000)
    p = poisson_diff_pmf(xs, T)
    keep = int(np.flatnonzero(p >= min_prob).max())
    atoms = np.arange(-keep, keep + 1)
    probs = poisson_diff_pmf(atoms, T)
    return SignalSpec(
        kind="discrete",
        atoms=atoms.astype(float),
        probs=probs,
        sampler="N^1_T - N^2_T",
        countable=True,
        tail_mass=max(0.0, 1.0 - float(probs.sum())),
    )


# ---------------------------------------------------------------------------
# Brownian maximum with independent uniform noise
# ---------------------------------------------------------------------------


def gamma_map(x):
    """``2x/(1-2x)`` on ``[0, 1/2)``, ``(2-2x)/(2x-1)`` on ``(1/2, 1]``, ``+inf`` at 1/2.

    ``gamma(x)`` is the largest running maximum compatible with the signal
    value ``x``.
    """
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise DomainError("gamma_map is defined on [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = 2.0 * x / (1.0 - 2.0 * x)
        hi = (2.0 - 2.0 * x) / (2.0 * x - 1.0)
        out = np.where(x < 0.5, lo, np.where(x > 0.5, hi, np.inf))
    return float(out) if out.ndim == 0 else out


def signal_interval(z):
    """Support ``[a(z), b(z)]`` of ``L`` given running maximum ``z``."""
    z = np.asarray(z, dtype=float)
    return z / (2.0 + 2.0 * z), (2.0 + z) / (2.0 + 2.0 * z)


def reflection_law_density(x, T: float):
    """Lebesgue density of ``L``: ``(2 Phi(g/sqrt T) - 1) + sqrt(2T/pi)(1 - e^{-g^2/2T})``, ``g = gamma(x)``."""
    g = np.asarray(gamma_map(x), dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        d = (2.0 * norm_cdf(g / math.sqrt(T)) - 1.0) + math.sqrt(2.0 * T / math.pi) * (
            1.0 - np.exp(-(g * g) / (2.0 * T))
        )
    d = np.where(np.isinf(g), 1.0 + math.sqrt(2.0 * T / math.pi), d)
    return float(d) if d.ndim == 0 else d


def reflection_density_terminal(x, w_max_T, T: float):
    """``q^x_T = 1{W*_T <= gamma(x)} (1 + W*_T) / D(x)`` with ``D`` the law density."""
    if not T > 0:
        raise InvalidParameterError(f"T must be positive, got {T}")
    x = np.asarray(x, dtype=float)
    m = np.asarray(w_max_T, dtype=float)
    g = np.asarray(gamma_map(x))
    half = x == 0.5
    d = np.where(half, 1.0 + math.sqrt(2.0 * T / math.pi), reflection_law_density(np.where(half, 0.25, x), T))
    inside = half | (m <= g)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(inside, (1.0 + m) / d, 0.0)
    return float(out) if out.ndim == 0 else out


def reflection_density(x, t: float, w_t, w_max_t, T: float):
    """``q^x_t`` for ``t < T`` in the Brownian-maximum model (closed form).

    Vectorised over ``x``, ``w_t`` and ``w_max_t``; requires
    ``w_max_t >= max(w_t, 0)``.
    """
    if not T > 0:
        raise InvalidParameterError(f"T must be positive, got {T}")
    if not 0.0 <= t < T:
        raise DomainError(f"t={t} outside [0, {T}); use reflection_density_terminal at T")
    x = np.asarray(x, dtype=float)
    w = np.asarray(w_t, dtype=float)
    m = np.asarray(w_max_t, dtype=float)
    tau = T - t
    s_tau = math.sqrt(tau)
    s_T = math.sqrt(T)
    gap = (m - w) / s_tau
    phi_gap = norm_cdf(gap)
    e_gap = np.exp(-0.5 * gap * gap)

    # x = 1/2: no upper constraint on the maximum
    half_val = (SQRT2PI * ((m - w) * phi_gap + 0.5 + w - 0.5 * m) + s_tau * e_gap) / (
        math.sqrt(math.pi / 2.0) + s_T
    )

    xs = np.where(x == 0.5, 0.25, x)
    g = np.asarray(gamma_map(xs))
    den = SQRT2PI * (norm_cdf(g / s_T) - 0.5) + s_T * (1.0 - np.exp(-(g * g) / (2.0 * T)))
    first = (1.0 + m) * SQRT2PI * (phi_gap - 0.5)
    h = (g - w) / s_tau
    second = (1.0 + w) * SQRT2PI * (norm_cdf(h) - phi_gap) + s_tau * (e_gap - np.exp(-0.5 * h * h))
    with np.errstate(divide="ignore", invalid="ignore"):
        gen_val = np.where(m <= g, (first + second) / den, 0.0)
    out = np.where(x == 0.5, half_val, gen_val)
    return float(out) if out.ndim == 0 else out


def uniform_signal_kernel(x: float, z: float) -> float:
    """``g(x, z) = (1 + z) 1{a(z) <= x <= b(z)}``: conditional density of ``L`` given ``W*_T = z``."""
    a, b = signal_interval(z)
    return (1.0 + z) if a <= x <= b else 0.0


def reflection_density_integral(x, t, w_t, w_max_t, T, kernel=uniform_signal_kernel, z_breaks=None):
    """``q^x_t`` from its integral representation over the terminal maximum.

    ``kernel(x, z)`` is the conditional density of ``L`` given ``W*_T = z``.
    The default kernel gives the uniform-noise model; a signal
    ``L = H(U, W*_T)`` with ``U = h(L, W*_T)`` of density ``g_U`` uses
    ``kernel(x, z) = g_U(h(x, z)) h_x(x, z)``.  ``z_breaks`` lists kernel
    discontinuities in ``z`` (defaults to ``gamma(x)`` for the uniform
    kernel).  Scalar inputs only; adaptive quadrature throughout.
    """
    if z_breaks is None:
        z_breaks = [] if kernel is not uniform_signal_kernel else [gamma_map(x)]
    z_breaks = sorted(b for b in z_breaks if math.isfinite(b))

    def integral(fn, lo):
        pts = [lo] + [b for b in z_breaks if b > lo] + [math.inf]
        return sum(integrate.quad(fn, pts[i], pts[i + 1], epsabs=1e-12, epsrel=1e-10, limit=200)[0]
                   for i in range(len(pts) - 1))

    den = integral(lambda z: kernel(x, z) * math.exp(-z * z / (2.0 * T)), 0.0)
    if t >= T:
        return math.sqrt(math.pi * T / 2.0) * kernel(x, w_max_t) / den
    tau = T - t
    head = kernel(x, w_max_t) * math.sqrt(2.0 * math.pi * tau) * (norm_cdf((w_max_t - w_t) / math.sqrt(tau)) - 0.5)
    tail = integral(lambda z: kernel(x, z) * math.exp(-((z - w_t) ** 2) / (2.0 * tau)), w_max_t)
    return math.sqrt(T / tau) * (head + tail) / den


# ---------------------------------------------------------------------------
# Quadrature helpers
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _gl(order: int):
    return np.polynomial.legendre.leggauss(order)


def _panels(breaks: np.ndarray, order: int):
    """Composite Gauss-Legendre nodes/weights over consecutive panels."""
    nodes, weights = _gl(order)
    lo = breaks[:-1, None]
    hi = breaks[1:, None]
    half = 0.5 * (hi - lo)
    pts = (lo + hi) * 0.5 + half * nodes[None, :]
    wts = half * weights[None, :]
    return pts.ravel(), wts.ravel()


# ---------------------------------------------------------------------------
# Density families
# ---------------------------------------------------------------------------


class DensityFamily:
    """Common interface of the worked-model density families.

    Subclasses set ``model_id``, ``T``, ``signal`` and implement
    :meth:`simulate`, :meth:`signal_value` and :meth:`q`.  Discrete families
    with ``Q = P`` also implement :meth:`atom_law`, which powers the
    closed-form routes of the optimizer.
    """

    model_id = "abstract"
    T: float
    signal: SignalSpec
    z_hook: Callable | None = None

    @property
    def is_discrete(self) -> bool:
        return self.signal.is_discrete

    @property
    def q_equals_p(self) -> bool:
        return self.z_hook is None

    def params(self) -> dict:
        return {}

    # -- simulation -------------------------------------------------------
    def simulate(self, grid: TimeGrid, rng: RngPolicy, path_index, workers: int = 1) -> PathBundle:
        raise NotImplementedError

    def grid_for(self, times: Sequence[float] = (), n_steps: int | None = None) -> TimeGrid:
        """Uniform grid, or the coarsest grid through ``times`` (exact samplers allow it)."""
        if n_steps is not None:
            return TimeGrid.uniform(self.T, n_steps)
        return TimeGrid.from_times(times, self.T)

    def _apply_z_hook(self, bundle: PathBundle) -> PathBundle:
        if self.z_hook is not None:
            z = np.asarray(self.z_hook(bundle), dtype=float)
            if z.shape != bundle.z.shape or np.any(z <= 0):
                raise InvalidParameterError("z_hook must return a positive (n_paths, n_times) array")
            bundle.z = z
        return bundle

    # -- densities --------------------------------------------------------
    def signal_value(self, bundle: PathBundle) -> np.ndarray:
        raise NotImplementedError

    def q(self, x, bundle: PathBundle, j: int) -> np.ndarray:
        """``q^x_{t_j}`` on every path; ``x`` is a scalar or one value per path."""
        raise NotImplementedError

    def q_on_path(self, bundle: PathBundle, signal=None) -> np.ndarray:
        """``q^L_t`` along each path, shape ``(n_paths, n_times)``."""
        L = self.signal_value(bundle) if signal is None else signal
        return np.stack([self.q(L, bundle, j) for j in range(bundle.times.size)], axis=1)

    def mixed(self, f: Callable, bundle: PathBundle, j: int) -> np.ndarray:
        """``int f(x) q^x_{t_j} lambda(dx)`` on every path."""
        atoms, probs = self.signal.atoms, self.signal.probs
        acc = np.zeros(bundle.n_paths)
        for x, p in zip(atoms, probs):
            acc += p * f(x) * self.q(x, bundle, j)
        return acc

    # -- closed-form ingredients (discrete, Q = P) ------------------------
    def p_positive_terminal(self, x) -> float:
        """``P(q^x_T > 0)``; equals ``E[Z^G_T | L = x]`` when ``Q = P``."""
        raise InapplicableError(f"{self.model_id}: no closed form for P(q^x_T > 0)")

    def atom_law(self, x, t: float):
        """Conditional law of ``q^L_t`` given ``L = x`` as ``(values, weights)``."""
        raise InapplicableError(f"{self.model_id}: no closed-form conditional law")

    def terminal_q_values(self) -> np.ndarray | None:
        """Values taken by ``q^L_T`` (one per atom) when each is deterministic given ``L``."""
        return None


class GBMBinaryFamily(DensityFamily):
    """``L = 1{W_T >= c}`` in the geometric Brownian market."""

    model_id = "gbm-binary"

    def __init__(self, r: float | None = None, c: float | None = None, T: float = 1.0,
                 sigma=1.0, s0: float = 1.0, z_hook=None):
        if not T > 0:
            raise InvalidParameterError(f"T must be positive, got {T}")
        if (r is None) == (c is None):
            raise InvalidParameterError("give exactly one of r and c")
        self.T = float(T)
        self.c = gbm_binary_threshold(r, T) if c is None else float(c)
        self.signal = gbm_binary_law(self.c, self.T)
        # keep r exactly as given so that r = 1/2 stays symmetric
        self.r = float(r) if r is not None else float(self.signal.probs[1])
        if r is not None:
            self.signal = SignalSpec(kind="discrete", atoms=np.array([0.0, 1.0]),
                                     probs=np.array([1.0 - self.r, self.r]),
                                     sampler="indicator of W_T >= c")
        self.sigma = sigma
        self.s0 = float(s0)
        self.z_hook = z_hook

    def params(self):
        return {"r": self.r, "c": self.c, "T": self.T, "s0": self.s0}

    def simulate(self, grid, rng, path_index, workers=1):
        return self._apply_z_hook(simulate_gbm(self.sigma, self.s0, grid, rng, path_index, workers))

    def signal_value(self, bundle):
        return (bundle.w[:, -1] >= self.c).astype(float)

    def q(self, x, bundle, j):
        t = float(bundle.times[j])
        q0, q1 = gbm_binary_density(self.c, self.r, t, bundle.w[:, j], self.T)
        x = np.asarray(x)
        if x.ndim == 0:
            if x not in (0, 1):
                raise DomainError(f"{x!r} is not an atom of the signal")
            return q1 if x == 1 else q0
        return np.where(x == 1, q1, q0)

    def p_positive_terminal(self, x):
        return self.signal.prob(x)

    def terminal_q_values(self):
        return 1.0 / self.signal.probs

    def atom_law(self, x, t):
        lam = self.signal.prob(x)
        if t <= 0.0:
            return np.array([1.0]), np.array([1.0])
        if t >= self.T:
            return np.array([1.0 / lam]), np.array([1.0])
        st, stau = math.sqrt(t), math.sqrt(self.T - t)
        lo, hi = -12.0 * st, 12.0 * st
        breaks = np.concatenate([
            np.linspace(lo, hi, 97),
            self.c + stau * np.linspace(-16.0, 16.0, 65),
        ])
        breaks = np.unique(np.clip(breaks, lo, hi))
        w, gw = _panels(breaks, 16)
        q = gbm_binary_density(self.c, self.r, t, w, self.T)[int(x)]
        weights = gw * np.exp(-0.5 * (w / st) ** 2) / (SQRT2PI * st) * q
        keep = (weights > 0) & (q > 1e-300)
        return q[keep], weights[keep]


class PoissonDiffFamily(DensityFamily):
    """``L = N^1_T - N^2_T`` in the two-asset compensated Poisson market."""

    model_id = "poisson-diff"

    def __init__(self, T: float = 1.0, s0_1: float = 1.0, s0_2: float = 1.0, window: int = 40, z_hook=None):
        if not T > 0:
            raise InvalidParameterError(f"T must be positive, got {T}")
        self.T = float(T)
        self.s0_1, self.s0_2 = float(s0_1), float(s0_2)
        self.window = int(window)
        self.signal = poisson_diff_law(self.T)
        self.z_hook = z_hook

    def params(self):
        return {"T": self.T, "s0_1": self.s0_1, "s0_2": self.s0_2}

    def simulate(self, grid, rng, path_index, workers=1):
        return self._apply_z_hook(simulate_poisson_pair(grid, self.s0_1, self.s0_2, rng, path_index, workers))

    def signal_value(self, bundle):
        return (bundle.n1[:, -1] - bundle.n2[:, -1]).astype(float)

    def q(self, x, bundle, j):
        t = float(bundle.times[j])
        n = bundle.n1[:, j] - bundle.n2[:, j]
        return np.asarray(poisson_density(np.rint(x).astype(np.int64) if np.ndim(x) else int(round(x)),
                                          t, n, self.T), dtype=float) * np.ones(bundle.n_paths)

    def mixed(self, f, bundle, j):
        # sum over the remaining increment d = x - n_t, weight P(N_T - N_t = d)
        t = float(bundle.times[j])
        n = (bundle.n1[:, j] - bundle.n2[:, j]).astype(float)
        if t == self.T:
            return np.asarray([f(v) for v in n], dtype=float)
        d = np.arange(-self.window, self.window + 1)
        wts = poisson_diff_pmf(d, self.T - t)
        acc = np.zeros(bundle.n_paths)
        for di, wi in zip(d, wts):
            acc += wi * np.asarray(f(n + di), dtype=float)
        return acc

    def p_positive_terminal(self, x):
        return float(poisson_diff_pmf(x, self.T))

    def terminal_q_values(self):
        return 1.0 / self.signal.probs

    def atom_law(self, x, t):
        x = int(round(x))
        lam = float(poisson_diff_pmf(x, self.T))
        if t <= 0.0:
            return np.array([1.0]), np.array([1.0])
        if t >= self.T:
            return np.array([1.0 / lam]), np.array([1.0])
        n = np.arange(min(0, x) - self.window, max(0, x) + self.window + 1)
        log_rest = _log_pmf(x - n, self.T - t)
        q = np.exp(log_rest - math.log(lam))
        weights = np.exp(_log_pmf(n, t) + log_rest - math.log(lam))
        keep = (weights > 0) & (q > 1e-300)
        return q[keep], weights[keep]


class ReflectionUniformFamily(DensityFamily):
    """``L = W*_T / (2(1 + W*_T)) + U / (1 + W*_T)`` with ``U`` uniform and independent."""

    model_id = "reflection-uniform"

    def __init__(self, T: float = 1.0, sigma=1.0, s0: float = 1.0, quad_order: int = 48, z_hook=None):
        if not T > 0:
            raise InvalidParameterError(f"T must be positive, got {T}")
        self.T = float(T)
        self.sigma = sigma
        self.s0 = float(s0)
        self.quad_order = int(quad_order)
        self.z_hook = z_hook
        self.signal = SignalSpec(
            kind="continuous",
            density=lambda x: reflection_law_density(x, self.T),
            support=(0.0, 1.0),
            breakpoints=(0.5,),
            sampler="W*/(2(1+W*)) + U/(1+W*)",
        )

    def params(self):
        return {"T": self.T, "s0": self.s0}

    def simulate(self, grid, rng, path_index, workers=1):
        return self._apply_z_hook(simulate_reflection(self.sigma, self.s0, grid, rng, path_index, workers))

    def signal_value(self, bundle):
        m = bundle.w_max[:, -1]
        return m / (2.0 * (1.0 + m)) + bundle.u_indep / (1.0 + m)

    def q(self, x, bundle, j):
        j = j % bundle.times.size
        t = float(bundle.times[j])
        if j == bundle.times.size - 1:
            return np.asarray(reflection_density_terminal(x, bundle.w_max[:, j], self.T)) * np.ones(bundle.n_paths)
        return np.asarray(reflection_density(x, t, bundle.w[:, j], bundle.w_max[:, j], self.T)) * np.ones(bundle.n_paths)

    def mixed(self, f, bundle, j):
        """Per-path ``int f(x) q^x_t lambda(dx)`` by Gauss-Legendre on ``[a, 1/2]`` and ``[1/2, b]``.

        Both pieces are smooth: ``q^x_t`` vanishes outside ``[a(W*_t), b(W*_t)]``
        and the only interior kink of ``lambda`` is at ``x = 1/2``.
        """
        t = float(bundle.times[j])
        m = bundle.w_max[:, j]
        a, b = signal_interval(m)
        nodes, weights = _gl(self.quad_order)
        acc = np.zeros(bundle.n_paths)
        for lo, hi in ((a, np.full_like(a, 0.5)), (np.full_like(b, 0.5), b)):
            half = 0.5 * (hi - lo)
            xs = 0.5 * (hi + lo) + half * nodes[:, None]
            if t >= self.T:
                qv = reflection_density_terminal(xs, m, self.T)
            else:
                qv = reflection_density(xs, t, bundle.w[:, j], m, self.T)
            vals = np.asarray(f(xs), dtype=float) * qv * reflection_law_density(xs, self.T)
            acc += half * (weights @ vals)
        return acc

    def expected_inverse_density_quadrature(self) -> float:
        """``int P(W*_T <= gamma(x)) lambda(dx)`` by adaptive quadrature."""
        T = self.T

        def integrand(x):
            return (2.0 * norm_cdf(gamma_map(x) / math.sqrt(T)) - 1.0) * reflection_law_density(x, T)

        return sum(integrate.quad(integrand, lo, hi, epsabs=1e-12, limit=200)[0] for lo, hi in ((0, 0.5), (0.5, 1)))


class CustomDiscreteFamily(DensityFamily):
    """User-supplied discrete signal on top of the geometric Brownian market.

    Parameters
    ----------
    atoms, probs
        Signal atoms and their unconditional probabilities.
    cond_prob
        ``cond_prob(bundle, j)`` returning ``P(L = x | F_{t_j})`` for every
        path and atom, shape ``(n_paths, n_atoms)``.  ``None`` means ``L`` is
        independent of the market, i.e. ``q^x == 1`` (the no-information
        case).
    signal_fn
        ``signal_fn(bundle)`` returning ``L`` per path; required with
        ``cond_prob``.  For an independent signal ``L`` is drawn from a
        separate stream of each path's generator.
    """

    model_id = "custom-discrete"

    def __init__(self, atoms, probs, cond_prob=None, signal_fn=None, T: float = 1.0,
                 sigma=1.0, s0: float = 1.0, z_hook=None, check_paths: int = 64):
        self.T = float(T)
        self.signal = SignalSpec(kind="discrete", atoms=np.asarray(atoms, float), probs=np.asarray(probs, float))
        if cond_prob is not None and signal_fn is None:
            raise InvalidParameterError("a conditional-probability hook needs signal_fn")
        self.cond_prob = cond_prob
        self.signal_fn = signal_fn
        self.sigma = sigma
        self.s0 = float(s0)
        self.z_hook = z_hook
        if cond_prob is not None and check_paths:
            self._spot_check(check_paths)

    @property
    def independent(self) -> bool:
        return self.cond_prob is None

    def params(self):
        return {"atoms": self.signal.atoms.tolist(), "probs": self.signal.probs.tolist(), "T": self.T,
                "independent": self.independent}

    def _spot_check(self, n):
        bundle = self.simulate(TimeGrid.uniform(self.T, 4), RngPolicy(0x5EED), np.arange(n))
        for j in range(bundle.times.size):
            total = self.mixed(lambda x: 1.0, bundle, j)
            if np.max(np.abs(total - 1.0)) > 1e-10:
                raise InvalidParameterError("conditional probabilities do not sum to one")

    def simulate(self, grid, rng, path_index, workers=1):
        bundle = simulate_gbm(self.sigma, self.s0, grid, rng, path_index, workers)
        if self.independent:
            bundle.u_indep = np.array([rng.generator(int(i), stream=1).random() for i in bundle.path_index])
        return self._apply_z_hook(bundle)

    def signal_value(self, bundle):
        if self.independent:
            cdf = np.cumsum(self.signal.probs)
            pos = np.minimum(np.searchsorted(cdf, bundle.u_indep, side="right"), cdf.size - 1)
            return self.signal.atoms[pos]
        return np.asarray(self.signal_fn(bundle), dtype=float)

    def q(self, x, bundle, j):
        if self.independent:
            return np.ones(bundle.n_paths)
        probs = np.asarray(self.cond_prob(bundle, j), dtype=float)
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            col = np.flatnonzero(self.signal.atoms == x)
            if col.size == 0:
                raise DomainError(f"{x!r} is not an atom of the signal")
            return probs[:, col[0]] / self.signal.probs[col[0]]
        cols = np.searchsorted(self.signal.atoms, x)
        return probs[np.arange(bundle.n_paths), cols] / self.signal.probs[cols]

    def p_positive_terminal(self, x):
        if self.independent:
            self.signal.prob(x)
            return 1.0
        return super().p_positive_terminal(x)

    def terminal_q_values(self):
        return np.ones(self.signal.atoms.size) if self.independent else None

    def atom_law(self, x, t):
        if self.independent:
            self.signal.prob(x)
            return np.array([1.0]), np.array([1.0])
        return super().atom_law(x, t)


def independent_signal(atoms=(0.0, 1.0), probs=(0.5, 0.5), **kwargs) -> CustomDiscreteFamily:
    """Signal independent of the market: ``q^x == 1`` and no arbitrage."""
    return CustomDiscreteFamily(atoms, probs, **kwargs)


FAMILIES = {
    "gbm-binary": GBMBinaryFamily,
    "poisson-diff": PoissonDiffFamily,
    "reflection-uniform": ReflectionUniformFamily,
    "custom-discrete": CustomDiscreteFamily,
}


def make_family(model_id: str, **params) -> DensityFamily:
    try:
        cls = FAMILIES[model_id]
    except KeyError:
        raise InvalidParameterError(f"unknown model id {model_id!r}; expected one of {sorted(FAMILIES)}") from None
    return cls(**params)


# ---------------------------------------------------------------------------
# Mixing identity
# ---------------------------------------------------------------------------


@dataclass
class MixingReport:
    """Two independent estimates of ``E[f(L)]`` and their comparison."""

    direct: float
    direct_stderr: float
    mixed: float
    mixed_stderr: float
    difference: float
    stderr: float
    z: float
    t: float
    n_paths: int


def mixing_identity_check(family: DensityFamily, f: Callable, t: float, n_paths: int,
                          rng: RngPolicy, workers: int = 1) -> MixingReport:
    """Compare Monte Carlo ``E[f(L)]`` with Monte Carlo ``E[int f(x) q^x_t lambda(dx)]``.

    The two sides use unrelated seeds, so their difference has variance equal
    to the sum of the two sampling variances.
    """
    idx = np.arange(n_paths)
    grid = family.grid_for([t])
    left = family.simulate(grid, rng, idx, workers)
    lhs = np.asarray(f(family.signal_value(left)), dtype=float) * np.ones(n_paths)
    right = family.simulate(grid, rng.spawn(1), idx, workers)
    rhs = family.mixed(f, right, grid.index_of(t))
    m1, s1 = tree_mean_stderr(lhs)
    m2, s2 = tree_mean_stderr(rhs)
    se = math.hypot(s1, s2)
    diff = m1 - m2
    z = 0.0 if se == 0 and diff == 0 else (diff / se if se > 0 else math.copysign(math.inf, diff))
    return MixingReport(m1, s1, m2, s2, diff, se, z, t, n_paths)
