"""Discretized stochastic integrals for the binary Brownian signal.

With ``c = 0`` (``r = 1/2``) the insider reaches terminal wealth ``v`` from
``v/2`` by holding

    theta_t = sign(L) v / (sigma_t S_t) phi(W_t / sqrt(T - t)) / sqrt(T - t),

where ``sign(L)`` is ``+1`` for ``L = 1`` and ``-1`` for ``L = 0``.  The
wealth it generates is ``v Phi(sign W_t / sqrt(T - t))``, i.e.
``(v + k) q^L_t / q^L_T - k`` with ``q^L_T = 2``.  The same integrand,
scaled per atom, reproduces the numeraire portfolio ``q^L / Z``.

Integrals are left-point Riemann sums: strategies only ever see the path
state at the left end of each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .densities import SQRT2PI, DensityFamily, GBMBinaryFamily
from .errors import DomainError, InapplicableError, InvalidParameterError
from .mcsim import PathBundle, RngPolicy, TimeGrid

DEFAULT_GUARD = 0.01


@dataclass(frozen=True)
class PathState:
    """Everything a predictable strategy may look at: the state at one grid time."""

    t: float
    j: int
    w: np.ndarray
    s: np.ndarray
    w_max: np.ndarray
    z: np.ndarray
    sigma: np.ndarray | None
    signal: np.ndarray


@dataclass(frozen=True)
class StrategyFn:
    """Position in the first asset as a function of the current :class:`PathState`."""

    label: str
    fn: Callable[[PathState], np.ndarray]

    def __call__(self, state: PathState) -> np.ndarray:
        return self.fn(state)


@dataclass
class WealthPath:
    times: np.ndarray
    wealth: np.ndarray
    v0: float
    guard_index: int
    label: str = ""

    @property
    def terminal(self) -> np.ndarray:
        return self.wealth[:, -1]

    @property
    def floor(self) -> float:
        return float(self.wealth.min())

    @property
    def max_drawdown(self) -> np.ndarray:
        peak = np.maximum.accumulate(self.wealth, axis=1)
        return (peak - self.wealth).max(axis=1)


def guard_index(grid: TimeGrid, delta_guard: float) -> int:
    """Last grid index with ``t <= T (1 - delta_guard)``."""
    if not 0.0 <= delta_guard < 1.0:
        raise InvalidParameterError(f"delta_guard must lie in [0, 1), got {delta_guard}")
    cut = grid.horizon * (1.0 - delta_guard)
    return int(np.searchsorted(grid.times, cut * (1 + 1e-12), side="right") - 1)


def _state(bundle: PathBundle, j: int, signal) -> PathState:
    sig = None if bundle.sigma is None or j >= len(bundle.sigma) else np.asarray(bundle.sigma)[j]
    return PathState(float(bundle.times[j]), j, bundle.w[:, j] if bundle.w is not None else None,
                     bundle.s[:, j, :], bundle.w_max[:, j] if bundle.w_max is not None else None,
                     bundle.z[:, j], sig, signal)


def universal_strategy_gbm(v: float, sigma, t: float, w_t, s_t, T: float, sign):
    """Insider position for the universal strategy at ``r = 1/2``.

    ``sign`` is ``+1`` when the signal says ``W_T >= 0`` and ``-1``
    otherwise.
    """
    if t >= T:
        raise DomainError(f"t={t} must be below T={T}")
    tau = T - t
    w_t = np.asarray(w_t, dtype=float)
    kernel = np.exp(-w_t * w_t / (2.0 * tau)) / (SQRT2PI * math.sqrt(tau))
    return np.asarray(sign) * v / (np.asarray(sigma) * np.asarray(s_t)) * kernel


def integrate_strategy(bundle: PathBundle, strategy: StrategyFn, v0: float,
                       delta_guard: float = DEFAULT_GUARD, signal=None, asset: int = 0) -> WealthPath:
    """``v0 + sum theta_{t_i} (S_{t_{i+1}} - S_{t_i})`` up to the guard time, then held flat.

    Raises
    ------
    DomainError
        If the strategy returns a non-finite position; the message names the
        offending grid time.
    """
    g = guard_index(bundle.grid, delta_guard)
    n = bundle.n_paths
    gains = np.zeros((n, bundle.times.size))
    s = bundle.s[:, :, asset]
    for j in range(g):
        theta = np.asarray(strategy(_state(bundle, j, signal)), dtype=float) * np.ones(n)
        if not np.all(np.isfinite(theta)):
            raise DomainError(f"non-finite position at grid time t={bundle.times[j]!r} (index {j})")
        gains[:, j + 1] = theta * (s[:, j + 1] - s[:, j])
    wealth = v0 + np.cumsum(gains, axis=1)
    return WealthPath(bundle.times, wealth, float(v0), g, strategy.label)


def _sign(signal):
    return np.where(np.asarray(signal) == 1, 1.0, -1.0)


def universal_strategy(v: float, family: GBMBinaryFamily) -> StrategyFn:
    if not isinstance(family, GBMBinaryFamily) or family.c != 0.0:
        raise InapplicableError("the universal strategy is available for the binary signal with c = 0")
    T = family.T

    def fn(st: PathState):
        return universal_strategy_gbm(v, st.sigma, st.t, st.w, st.s[:, 0], T, _sign(st.signal))

    return StrategyFn("universal", fn)


def numeraire_strategy(family: GBMBinaryFamily) -> StrategyFn:
    """``phi_t = +-phi((W_t - c)/sqrt(T-t)) / (lambda_x sqrt(T-t) sigma_t S_t)`` so that ``1 + phi.S = q^L``."""
    if not isinstance(family, GBMBinaryFamily):
        raise InapplicableError("an explicit numeraire integrand is available for the binary Brownian signal only")
    T, c, r = family.T, family.c, family.r

    def fn(st: PathState):
        tau = T - st.t
        arg = (st.w - c) / math.sqrt(tau)
        dens = np.exp(-0.5 * arg * arg) / (SQRT2PI * math.sqrt(tau))
        up = np.asarray(st.signal) == 1
        scale = np.where(up, 1.0 / r, -1.0 / (1.0 - r))
        return scale * dens / (st.sigma * st.s[:, 0])

    return StrategyFn("numeraire", fn)


def universal_wealth(bundle: PathBundle, v: float, k: float, family: DensityFamily) -> WealthPath:
    """``(v + k) q^L_t / q^L_T - k`` along each path (requires constant ``q^L_T``)."""
    vals = family.terminal_q_values() if family.q_equals_p else None
    if vals is None or np.ptp(vals) > 1e-9 * np.max(vals):
        raise InapplicableError("universal wealth needs a constant q^L_T")
    L = family.signal_value(bundle)
    q = family.q_on_path(bundle, L)
    qT = q[:, -1:]
    wealth = (v + k) * q / qT - k
    return WealthPath(bundle.times, wealth, float(wealth[0, 0]), bundle.times.size - 1, "universal-oracle")


def tracking_error(wealth: np.ndarray, oracle: np.ndarray, upto: int, columns=None) -> tuple[float, np.ndarray]:
    """Sup over grid times (``<= upto``) of the cross-path RMS of ``wealth - oracle``."""
    cols = np.arange(upto + 1) if columns is None else np.asarray(columns)
    cols = cols[cols <= upto]
    rms = np.sqrt(np.mean((wealth[:, cols] - oracle[:, cols]) ** 2, axis=0))
    return float(rms.max()), rms


@dataclass
class ReplicationReport:
    v: float
    n_paths: int
    steps: list
    rms: list
    numeraire_rms: list
    floor: float
    floor_ok: bool
    terminal_mean: float
    terminal_gap: float
    delta_guard: float
    numeraire_t0: tuple


def run_replication(family: GBMBinaryFamily, v: float = 1.0, n_paths: int = 1000, n_steps: int = 4096,
                    delta_guard: float = DEFAULT_GUARD, rng: RngPolicy | None = None, workers: int = 1,
                    halvings: int = 2) -> ReplicationReport:
    """Universal strategy and numeraire checks on one fine path set and its subsamples.

    The path set is simulated once at ``n_steps``; coarser grids
    (``n_steps/2``, ``n_steps/4``, ...) reuse the same Brownian paths, and
    every grid is scored on the times of the coarsest one.
    """
    rng = RngPolicy(0) if rng is None else rng
    fine = family.simulate(TimeGrid.uniform(family.T, n_steps), rng, np.arange(n_paths), workers)
    strides = [2 ** h for h in range(halvings, -1, -1)]
    coarse_times = fine.times[:: strides[0]]
    steps, rms, nrms = [], [], []
    wp_fine = None
    for stride in strides:
        b = fine.subsample(stride) if stride > 1 else fine
        L = family.signal_value(b)
        wp = integrate_strategy(b, universal_strategy(v, family), v / 2.0, delta_guard, L)
        oracle = universal_wealth(b, v, 0.0, family).wealth
        cols = np.searchsorted(b.times, coarse_times)
        cut = guard_index(fine.grid.subsample(strides[0]), delta_guard)
        err, _ = tracking_error(wp.wealth, oracle, wp.guard_index, cols[: cut + 1])
        nw = integrate_strategy(b, numeraire_strategy(family), 1.0, delta_guard, L)
        q = family.q_on_path(b, L) / b.z
        nerr, _ = tracking_error(nw.wealth, q, nw.guard_index, cols[: cut + 1])
        steps.append(b.grid.n_steps)
        rms.append(err)
        nrms.append(nerr)
        wp_fine, oracle_fine, n_fine, q_fine = wp, oracle, nw, q
    g = wp_fine.guard_index
    gap = float(np.mean(np.abs(oracle_fine[:, -1] - wp_fine.wealth[:, g])))
    return ReplicationReport(
        v=v, n_paths=n_paths, steps=steps, rms=rms, numeraire_rms=nrms,
        floor=wp_fine.floor, floor_ok=bool(wp_fine.floor >= 0.0),
        terminal_mean=float(wp_fine.terminal.mean()), terminal_gap=gap, delta_guard=delta_guard,
        numeraire_t0=(float(n_fine.wealth[0, 0]), float(q_fine[0, 0])),
    )


def replication_rows(family: GBMBinaryFamily, v: float, bundle: PathBundle, delta_guard: float = DEFAULT_GUARD):
    """Per-path CSV rows ``(path, t, wealth, oracle, density)``."""
    L = family.signal_value(bundle)
    wp = integrate_strategy(bundle, universal_strategy(v, family), v / 2.0, delta_guard, L)
    oracle = universal_wealth(bundle, v, 0.0, family).wealth
    q = family.q_on_path(bundle, L)
    for i in range(bundle.n_paths):
        for j, t in enumerate(bundle.times):
            yield int(bundle.path_index[i]), float(t), float(wp.wealth[i, j]), float(oracle[i, j]), float(q[i, j])


__all__ = [
    "PathState", "StrategyFn", "WealthPath", "ReplicationReport",
    "universal_strategy_gbm", "integrate_strategy", "universal_strategy", "numeraire_strategy",
    "universal_wealth", "tracking_error", "guard_index", "run_replication", "replication_rows",
]
