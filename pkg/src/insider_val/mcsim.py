"""Exact-transition Monte Carlo paths for the three worked markets.

Every path is generated from its own counter-based stream keyed by
``(master_seed, path_index)``, so a path never depends on which batch or
worker produced it.  Aggregates go through :func:`tree_sum`, which adds in a
fixed pairwise order over the path axis.

Models
------
``gbm``
    ``dS = S sigma dW`` with piecewise-constant deterministic volatility,
    sampled with exact log-normal increments.
``poisson-pair``
    ``S^i_t = S^i_0 e^{-t} 2^{N^i_t}`` driven by two independent unit-rate
    Poisson processes, sampled from exponential inter-arrival times.
``reflection``
    Brownian motion together with its *continuous-time* running maximum,
    sampled exactly step by step (Brownian-bridge maximum), plus an
    independent uniform draw.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DomainError, InvalidParameterError

__all__ = [
    "TimeGrid",
    "RngPolicy",
    "PathBundle",
    "Volatility",
    "norm_cdf",
    "norm_ppf",
    "tree_sum",
    "tree_mean_stderr",
    "simulate_gbm",
    "simulate_poisson_pair",
    "simulate_reflection",
    "sample_terminal_max_pair",
    "max_given_endpoint",
]

_MASK64 = (1 << 64) - 1

# Standard normal CDF / quantile.  ``ndtr`` is erf/erfc based with absolute
# error far below 1e-12 over the real line.
norm_cdf = ndtr
norm_ppf = ndtri


# ---------------------------------------------------------------------------
# Grid and RNG plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Ordered simulation times ``0 = t_0 < t_1 < ... < t_n = T``."""

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise InvalidParameterError("a time grid needs at least two points")
        if times[0] != 0.0:
            raise InvalidParameterError("time grid must start at 0")
        if not np.all(np.diff(times) > 0):
            raise InvalidParameterError("time grid must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if not horizon > 0:
            raise InvalidParameterError(f"horizon must be positive, got {horizon}")
        if int(n_steps) < 1:
            raise InvalidParameterError(f"n_steps must be >= 1, got {n_steps}")
        times = np.linspace(0.0, horizon, int(n_steps) + 1)
        times[-1] = horizon
        return cls(times)

    @classmethod
    def from_times(cls, times: Sequence[float], horizon: float | None = None) -> "TimeGrid":
        """Grid through the given times, with 0 and ``horizon`` added."""
        pts = set(float(t) for t in times)
        pts.add(0.0)
        if horizon is not None:
            pts.add(float(horizon))
        return cls(np.array(sorted(pts)))

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float, rtol: float = 1e-12) -> int:
        """Index of grid time ``t``; raises if ``t`` is not a grid point."""
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > rtol * max(1.0, self.horizon):
            raise DomainError(f"time {t} is not on the simulation grid")
        return j

    def subsample(self, stride: int) -> "TimeGrid":
        if self.n_steps % stride:
            raise InvalidParameterError("stride must divide the number of steps")
        return TimeGrid(self.times[::stride])


@dataclass(frozen=True)
class RngPolicy:
    """Counter-based keyed random streams.

    Path ``i`` uses a Philox generator keyed by ``(master_seed, i)``; the
    optional ``stream`` offsets the 256-bit counter so that several
    independent streams can be attached to the same path.
    """

    master_seed: int
    stream_kind: str = "philox"

    def __post_init__(self):
        if self.stream_kind != "philox":
            raise InvalidParameterError(f"unsupported stream kind {self.stream_kind!r}")

    def generator(self, path_index: int, stream: int = 0) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=[int(self.master_seed) & _MASK64, int(path_index) & _MASK64],
            counter=[0, 0, 0, int(stream) & _MASK64],
        )
        return np.random.Generator(bitgen)

    def spawn(self, offset: int) -> "RngPolicy":
        """A policy with an unrelated master seed, for independent replications."""
        mixed = (int(self.master_seed) * 0x9E3779B97F4A7C15 + int(offset) * 0xBF58476D1CE4E5B9) & _MASK64
        return RngPolicy(mixed, self.stream_kind)


def _as_indices(path_index) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(path_index, dtype=np.int64))
    if idx.ndim != 1:
        raise InvalidParameterError("path_index must be an int or a 1-d sequence")
    if np.any(idx < 0):
        raise InvalidParameterError("path indices must be nonnegative")
    return idx


def _run_batched(fn: Callable[[np.ndarray], dict], idx: np.ndarray, workers: int) -> dict:
    """Apply ``fn`` to index chunks and stack the per-field results in index order."""
    workers = max(1, int(workers))
    if workers == 1 or idx.size < 2 * workers:
        return fn(idx)
    chunks = np.array_split(idx, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, chunks))
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def tree_sum(x, axis: int = 0) -> np.ndarray | float:
    """Sum along ``axis`` by pairwise halving in a fixed order.

    The result depends only on the values and their order, never on how the
    paths were partitioned among workers.
    """
    a = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    if a.shape[0] == 0:
        out = np.zeros(a.shape[1:])
        return float(out) if out.ndim == 0 else out
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            a = np.concatenate([a, np.zeros((1,) + a.shape[1:])], axis=0)
        a = a[0::2] + a[1::2]
    out = a[0]
    return float(out) if np.ndim(out) == 0 else out


def tree_mean_stderr(x, axis: int = 0):
    """Sample mean and standard error of the mean, both via :func:`tree_sum`."""
    a = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = a.shape[0]
    if n == 0:
        raise InvalidParameterError("cannot average an empty sample")
    mean = tree_sum(a) / n
    if n < 2:
        return mean, np.zeros_like(mean) if np.ndim(mean) else 0.0
    var = tree_sum((a - mean) ** 2) / (n - 1)
    return mean, np.sqrt(var / n)


# ---------------------------------------------------------------------------
# Path container
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PathBundle:
    """A batch of simulated paths on a common grid.

    Arrays carry a leading path axis.  ``s`` has shape
    ``(n_paths, n_times, n_assets)``; ``w``, ``w_max``, ``z``, ``n1``, ``n2``
    have shape ``(n_paths, n_times)``.  Fields that a model does not use are
    ``None``.
    """

    model_id: str
    grid: TimeGrid
    path_index: np.ndarray
    s: np.ndarray
    z: np.ndarray
    w: np.ndarray | None = None
    w_max: np.ndarray | None = None
    n1: np.ndarray | None = None
    n2: np.ndarray | None = None
    u_indep: np.ndarray | None = None
    sigma: np.ndarray | None = None  # per-step volatility, shape (n_steps,)
    params: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.path_index.size)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def _map(self, fn) -> dict:
        out = {}
        for name in ("s", "z", "w", "w_max", "n1", "n2"):
            val = getattr(self, name)
            out[name] = None if val is None else fn(val)
        return out

    def subsample(self, stride: int) -> "PathBundle":
        """The same paths observed on every ``stride``-th grid point.

        For reflection paths ``w_max`` stays the continuous-time maximum; for
        GBM paths it is recomputed on the coarse grid.
        """
        grid = self.grid.subsample(stride)
        fields = self._map(lambda a: a[:, ::stride])
        sigma = None
        if self.sigma is not None:
            # volatility is constant on coarse cells only if it is on the fine ones
            sig = self.sigma.reshape(-1, stride)
            if not np.all(sig == sig[:, :1]):
                raise InvalidParameterError("volatility varies inside a coarse cell")
            sigma = sig[:, 0].copy()
        if self.w is not None and self.model_id == "gbm":
            fields["w_max"] = np.maximum.accumulate(fields["w"], axis=1)
        return replace(self, grid=grid, sigma=sigma, **fields)

    def select(self, rows) -> "PathBundle":
        rows = np.asarray(rows)
        fields = self._map(lambda a: a[rows])
        u = None if self.u_indep is None else self.u_indep[rows]
        return replace(self, path_index=self.path_index[rows], u_indep=u, **fields)

    @classmethod
    def concat(cls, bundles: Sequence["PathBundle"]) -> "PathBundle":
        first = bundles[0]

        def cat(name):
            vals = [getattr(b, name) for b in bundles]
            return None if vals[0] is None else np.concatenate(vals, axis=0)

        return replace(
            first,
            path_index=cat("path_index"),
            s=cat("s"),
            z=cat("z"),
            w=cat("w"),
            w_max=cat("w_max"),
            n1=cat("n1"),
            n2=cat("n2"),
            u_indep=cat("u_indep"),
        )

    def columns(self, row: int) -> dict[str, np.ndarray]:
        """Per-field columns for one path, one entry per grid time."""
        cols = {"t": self.times}
        if self.w is not None:
            cols["w"] = self.w[row]
        if self.w_max is not None:
            cols["w_max"] = self.w_max[row]
        if self.n1 is not None:
            cols["n1"] = self.n1[row]
            cols["n2"] = self.n2[row]
        for a in range(self.s.shape[2]):
            cols[f"s{a + 1}"] = self.s[row, :, a]
        cols["z"] = self.z[row]
        return cols

    def to_csv(self, path, row: int = 0) -> None:
        """Dump one path as CSV: one row per grid time, one column per field."""
        cols = self.columns(row)
        names = list(cols)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for j in range(self.times.size):
                writer.writerow([format(float(cols[n][j]), ".17g") for n in names])


# ---------------------------------------------------------------------------
# Volatility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Volatility:
    """Piecewise-constant deterministic volatility, right-continuous.

    ``values[i]`` applies on ``[breaks[i-1], breaks[i])`` with
    ``breaks[-1] = 0`` implied; a scalar volatility has no breaks.
    """

    values: tuple[float, ...]
    breaks: tuple[float, ...] = ()

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != len(self.breaks) + 1:
            raise InvalidParameterError("need one more volatility value than breakpoints")
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise InvalidParameterError(f"volatility must be finite and nonnegative, got {vals}")
        if list(self.breaks) != sorted(self.breaks):
            raise InvalidParameterError("volatility breakpoints must be increasing")
        object.__setattr__(self, "values", vals)

    @classmethod
    def coerce(cls, sigma) -> "Volatility":
        if isinstance(sigma, Volatility):
            return sigma
        if np.isscalar(sigma):
            return cls((float(sigma),))
        raise InvalidParameterError("sigma must be a number or a Volatility")

    def __call__(self, t):
        idx = np.searchsorted(np.asarray(self.breaks), np.asarray(t, dtype=float), side="right")
        return np.asarray(self.values)[idx]

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        """Per-step volatility; breakpoints must sit on grid points."""
        for b in self.breaks:
            if 0 < b < grid.horizon:
                grid.index_of(b)
        return np.asarray(self(grid.times[:-1]), dtype=float)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def max_given_endpoint(w_end, dt, uniform):
    """Inverse-transform sample of ``max_{[0,dt]} W`` given ``W_dt = w_end``.

    Uses ``P(M <= m | W_dt = w) = 1 - exp(-2 m (m - w) / dt)`` for
    ``m >= max(w, 0)``.
    """
    e = -np.log1p(-np.asarray(uniform, dtype=float))
    w_end = np.asarray(w_end, dtype=float)
    return 0.5 * (w_end + np.sqrt(w_end * w_end + 2.0 * dt * e))


def simulate_gbm(sigma, s0: float, grid: TimeGrid, rng: RngPolicy, path_index, workers: int = 1) -> PathBundle:
    """Geometric Brownian motion with exact log-normal increments.

    ``S_{t+dt} = S_t exp(sigma sqrt(dt) xi - sigma^2 dt / 2)``.  The Brownian
    driver is kept in ``w`` and its discrete running maximum in ``w_max``.
    """
    if not (math.isfinite(s0) and s0 > 0):
        raise InvalidParameterError(f"s0 must be positive, got {s0}")
    vol = Volatility.coerce(sigma)
    sig = vol.on_grid(grid)
    dt = grid.dt
    sqdt = np.sqrt(dt)
    idx = _as_indices(path_index)
    n = grid.n_steps

    def draw(chunk):
        xi = np.empty((chunk.size, n))
        for r, i in enumerate(chunk):
            xi[r] = rng.generator(int(i)).standard_normal(n)
        return {"xi": xi}

    xi = _run_batched(draw, idx, workers)["xi"]
    dw = xi * sqdt
    w = np.zeros((idx.size, n + 1))
    np.cumsum(dw, axis=1, out=w[:, 1:])
    logs = np.zeros_like(w)
    np.cumsum(sig * dw - 0.5 * sig * sig * dt, axis=1, out=logs[:, 1:])
    s = (s0 * np.exp(logs))[:, :, None]
    return PathBundle(
        model_id="gbm",
        grid=grid,
        path_index=idx,
        s=s,
        z=np.ones_like(w),
        w=w,
        w_max=np.maximum.accumulate(w, axis=1),
        sigma=sig,
        params={"s0": s0},
    )


def _arrivals(gen: np.random.Generator, horizon: float) -> np.ndarray:
    """Jump times of a unit-rate Poisson process on ``[0, horizon]``."""
    batch = int(horizon + 6.0 * math.sqrt(horizon) + 8)
    times = np.cumsum(gen.standard_exponential(batch))
    while times[-1] <= horizon:
        more = times[-1] + np.cumsum(gen.standard_exponential(batch))
        times = np.concatenate([times, more])
    return times[times <= horizon]


def simulate_poisson_pair(grid: TimeGrid, s0_1: float, s0_2: float, rng: RngPolicy, path_index, workers: int = 1) -> PathBundle:
    """Two independent compensated Poisson assets ``S^i_t = S^i_0 e^{-t} 2^{N^i_t}``."""
    for name, val in (("s0_1", s0_1), ("s0_2", s0_2)):
        if not (math.isfinite(val) and val > 0):
            raise InvalidParameterError(f"{name} must be positive, got {val}")
    idx = _as_indices(path_index)
    times = grid.times
    horizon = grid.horizon

    def draw(chunk):
        n1 = np.empty((chunk.size, times.size), dtype=np.int64)
        n2 = np.empty_like(n1)
        for r, i in enumerate(chunk):
            gen = rng.generator(int(i))
            n1[r] = np.searchsorted(_arrivals(gen, horizon), times, side="right")
            n2[r] = np.searchsorted(_arrivals(gen, horizon), times, side="right")
        return {"n1": n1, "n2": n2}

    out = _run_batched(draw, idx, workers)
    n1, n2 = out["n1"], out["n2"]
    decay = np.exp(-times)
    s = np.stack([s0_1 * decay * np.exp2(n1), s0_2 * decay * np.exp2(n2)], axis=2)
    return PathBundle(
        model_id="poisson-pair",
        grid=grid,
        path_index=idx,
        s=s,
        z=np.ones(n1.shape),
        n1=n1,
        n2=n2,
        params={"s0_1": s0_1, "s0_2": s0_2},
    )


def simulate_reflection(sigma, s0: float, grid: TimeGrid, rng: RngPolicy, path_index, workers: int = 1) -> PathBundle:
    """Brownian motion with exact continuous-time running maximum.

    Each step draws the increment and, conditionally on it, the maximum of
    the Brownian bridge over the step; an independent uniform ``u_indep`` is
    drawn last.  ``w_max`` is the supremum over ``[0, t]``, so it can exceed
    the maximum of the sampled grid values.  With a one-step grid this is
    exactly :func:`sample_terminal_max_pair`.
    """
    if not (math.isfinite(s0) and s0 > 0):
        raise InvalidParameterError(f"s0 must be positive, got {s0}")
    sig = Volatility.coerce(sigma).on_grid(grid)
    dt = grid.dt
    idx = _as_indices(path_index)
    n = grid.n_steps

    def draw(chunk):
        xi = np.empty((chunk.size, n))
        un = np.empty((chunk.size, n))
        uu = np.empty(chunk.size)
        for r, i in enumerate(chunk):
            gen = rng.generator(int(i))
            pair = gen.random((n, 2))
            xi[r] = norm_ppf(pair[:, 0])
            un[r] = pair[:, 1]
            uu[r] = gen.random()
        return {"xi": xi, "un": un, "uu": uu}

    out = _run_batched(draw, idx, workers)
    dw = out["xi"] * np.sqrt(dt)
    bridge_max = max_given_endpoint(dw, dt, out["un"])
    w = np.zeros((idx.size, n + 1))
    np.cumsum(dw, axis=1, out=w[:, 1:])
    step_max = w[:, :-1] + bridge_max
    w_max = np.zeros_like(w)
    w_max[:, 1:] = np.maximum.accumulate(step_max, axis=1)
    w_max = np.maximum(w_max, 0.0)
    logs = np.zeros_like(w)
    np.cumsum(sig * dw - 0.5 * sig * sig * dt, axis=1, out=logs[:, 1:])
    return PathBundle(
        model_id="reflection",
        grid=grid,
        path_index=idx,
        s=(s0 * np.exp(logs))[:, :, None],
        z=np.ones_like(w),
        w=w,
        w_max=w_max,
        u_indep=out["uu"],
        sigma=sig,
        params={"s0": s0},
    )


def sample_terminal_max_pair(T: float, rng: RngPolicy, path_index):
    """Exact joint sample of ``(W_T, sup_{t<=T} W_t)``.

    ``W_T = sqrt(T) Phi^{-1}(u1)``; the maximum follows from the conditional
    law given ``W_T`` by inverse transform of ``u2``.
    """
    if not T > 0:
        raise InvalidParameterError(f"T must be positive, got {T}")
    bundle = simulate_reflection(0.0, 1.0, TimeGrid.uniform(T, 1), rng, path_index)
    return bundle.w[:, -1], bundle.w_max[:, -1]
