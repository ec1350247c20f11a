"""``insider-val`` command line.

Scenarios are TOML files with ``model``, ``signal``, ``utility``, ``clock``,
``run`` and ``task`` tables (or a list of them under ``[[scenario]]``).
Each subcommand runs its task on every scenario and writes one JSON report.

Exit codes: 0 success, 1 failed acceptance criteria (``suite``),
2 invalid input, 3 solver failure, 4 unwritable output.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .densities import make_family
from .diagnostics import expected_inverse_density, martingale_battery
from .dualopt import Clock, Utility, ValueFunction, conditional_deflator_mean, entropy, utility_gain_log
from .errors import ConsistencyError, InapplicableError, InsiderValError, SolverError
from .mcsim import RngPolicy, TimeGrid, Volatility
from .replication import replication_rows, run_replication
from .report import to_plain, validate, write_csv, write_json
from .valuation import pi_exp, pi_generic, pi_log, pi_power, uip_bounds, universal_value

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

SEED_ENV = "INSIDER_VAL_SEED"
TASKS = ("diagnose", "optimize", "value", "replicate", "suite")


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SigmaSteps(_Block):
    values: list[float]
    breaks: list[float] = []


Sigma = Union[float, SigmaSteps]


class GBMModel(_Block):
    id: Literal["gbm-binary"]
    r: float | None = None
    c: float | None = None
    T: float = Field(1.0, gt=0)
    sigma: Sigma = 1.0
    s0: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _one_of(self):
        if (self.r is None) == (self.c is None):
            raise ValueError("give exactly one of r and c")
        if self.r is not None and not 0 < self.r < 1:
            raise ValueError("r must lie in (0, 1)")
        return self


class PoissonModel(_Block):
    id: Literal["poisson-diff"]
    T: float = Field(1.0, gt=0)
    s0_1: float = Field(1.0, gt=0)
    s0_2: float = Field(1.0, gt=0)


class ReflectionModel(_Block):
    id: Literal["reflection-uniform"]
    T: float = Field(1.0, gt=0)
    sigma: Sigma = 1.0
    s0: float = Field(1.0, gt=0)


class CustomModel(_Block):
    id: Literal["custom-discrete"]
    T: float = Field(1.0, gt=0)
    sigma: Sigma = 1.0
    s0: float = Field(1.0, gt=0)


ModelBlock = Annotated[Union[GBMModel, PoissonModel, ReflectionModel, CustomModel], Field(discriminator="id")]


class SignalBlock(_Block):
    """Only the custom model takes a signal table: an independent signal with these atoms."""

    atoms: list[float]
    probs: list[float]


class UtilityBlock(_Block):
    kind: Literal["log", "power", "exp"] = "log"
    p: float | None = None
    alpha: float | None = None

    @model_validator(mode="after")
    def _params(self):
        if self.kind == "power" and not (self.p is not None and 0 < self.p < 1):
            raise ValueError("power utility needs p in (0, 1)")
        if self.kind == "exp" and not (self.alpha is not None and self.alpha > 0):
            raise ValueError("exponential utility needs alpha > 0")
        if self.kind != "power" and self.p is not None:
            raise ValueError(f"p is not a parameter of {self.kind} utility")
        if self.kind != "exp" and self.alpha is not None:
            raise ValueError(f"alpha is not a parameter of {self.kind} utility")
        return self

    def build(self) -> Utility:
        if self.kind == "power":
            return Utility.power(self.p)
        if self.kind == "exp":
            return Utility.exp(self.alpha)
        return Utility.log()


class ClockBlock(_Block):
    kind: Literal["terminal", "discrete", "uniform", "lebesgue"] = "terminal"
    times: list[float] | None = None
    weights: list[float] | None = None
    n: int | None = Field(None, gt=0)
    total: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _params(self):
        if self.kind == "discrete" and (self.times is None or self.weights is None):
            raise ValueError("a discrete clock needs times and weights")
        if self.kind == "uniform" and self.n is None:
            raise ValueError("a uniform clock needs n")
        return self

    def build(self, T: float) -> Clock:
        if self.kind == "discrete":
            return Clock.discrete(self.times, self.weights)
        if self.kind == "uniform":
            return Clock.uniform(T, self.n, self.total)
        if self.kind == "lebesgue":
            return Clock.lebesgue(T, self.total)
        return Clock.terminal(T)


class RunBlock(_Block):
    paths: int = Field(100_000, gt=0)
    steps: int = Field(512, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    workers: int = Field(1, gt=0)
    route: Literal["auto", "closed", "mc"] = "auto"
    z_threshold: float = Field(4.0, gt=0)


class TaskBlock(_Block):
    kind: Literal["diagnose", "optimize", "value", "replicate", "suite"] | None = None
    v: float = Field(1.0, gt=0)
    k: float = Field(0.0, ge=0)
    info: Literal["F", "G", "both"] = "both"
    method: Literal["auto", "closed", "root"] = "auto"
    bounds: bool = True
    v_grid: list[float] = []
    martingale: bool = True
    delta_guard: float = Field(0.01, ge=0, lt=1)
    dump_paths: int = Field(10, ge=0)


class Scenario(_Block):
    name: str = "default"
    model: ModelBlock
    signal: SignalBlock | None = None
    utility: UtilityBlock = UtilityBlock()
    clock: ClockBlock = ClockBlock()
    run: RunBlock = RunBlock()
    task: TaskBlock = TaskBlock()

    @model_validator(mode="after")
    def _signal(self):
        if self.model.id == "custom-discrete" and self.signal is None:
            raise ValueError("the custom-discrete model needs a signal table")
        if self.model.id != "custom-discrete" and self.signal is not None:
            raise ValueError(f"the {self.model.id} model derives its signal; remove the signal table")
        return self


class ConfigFile(_Block):
    scenario: list[Scenario]


def parse_config(data: dict) -> list[Scenario]:
    """Validate a parsed TOML document: either one scenario or ``[[scenario]]`` entries."""
    if "scenario" in data:
        return ConfigFile.model_validate(data).scenario
    return [Scenario.model_validate(data)]


def load_config(path) -> list[Scenario]:
    with open(path, "rb") as fh:
        return parse_config(tomllib.load(fh))


# ---------------------------------------------------------------------------
# Scenario -> library objects
# ---------------------------------------------------------------------------


def _sigma(s):
    return float(s) if isinstance(s, (int, float)) else Volatility(tuple(s.values), tuple(s.breaks))


def build_family(sc: Scenario):
    m = sc.model.model_dump()
    mid = m.pop("id")
    if "sigma" in m:
        m["sigma"] = _sigma(sc.model.sigma)
    if mid == "custom-discrete":
        m["atoms"], m["probs"] = sc.signal.atoms, sc.signal.probs
    return make_family(mid, **m)


def _rng(sc: Scenario) -> RngPolicy:
    return RngPolicy(sc.run.seed)


def _mc(sc: Scenario) -> dict:
    return {"n_paths": sc.run.paths, "rng": _rng(sc), "workers": sc.run.workers}


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


def task_diagnose(sc: Scenario) -> dict:
    fam = build_family(sc)
    out = {}
    if fam.is_discrete and fam.q_equals_p:
        out["closed_form"] = to_plain(expected_inverse_density(fam, "closed", z_threshold=sc.run.z_threshold))
    if sc.run.route != "closed":
        out["monte_carlo"] = to_plain(expected_inverse_density(fam, "mc", z_threshold=sc.run.z_threshold, **_mc(sc)))
    if sc.task.martingale and sc.run.route != "closed":
        reps = martingale_battery(fam, sc.run.paths, _rng(sc).spawn(1), n_steps=sc.run.steps,
                                  z_threshold=sc.run.z_threshold, workers=sc.run.workers)
        out["martingale"] = [to_plain(r) for r in reps]
    return out


def _solution_dict(sol) -> dict:
    d = to_plain(sol)
    d.pop("contributions", None)
    if sol.divergent:
        d["value"] = None
    return d


def task_optimize(sc: Scenario) -> dict:
    fam = build_family(sc)
    clock, U = sc.clock.build(fam.T), sc.utility.build()
    infos = ["F", "G"] if sc.task.info == "both" else [sc.task.info]
    route = sc.run.route
    out = {"route": route}
    bundle = None
    for info in infos:
        kw = {}
        if route == "mc" or (route == "auto" and not _closed_ok(fam, clock)):
            from .dualopt import simulate_for_clock

            if bundle is None:
                bundle = simulate_for_clock(fam, clock, sc.run.paths, _rng(sc), sc.run.workers)
            kw["bundle"] = bundle
        vf = ValueFunction(fam, info, clock, U, "mc" if kw else route, **kw)
        out[info] = _solution_dict(vf.solve(sc.task.v, sc.task.k))
    if fam.is_discrete and U.kind == "log" and clock.kind == "terminal" and fam.q_equals_p:
        out["utility_gain_log"] = utility_gain_log(sc.task.v, sc.task.k, fam)
        out["entropy"] = entropy(fam.signal)
        out["deflator_means"] = {str(x): conditional_deflator_mean(fam, x) for x in fam.signal.atoms}
    return out


def _closed_ok(fam, clock) -> bool:
    return fam.is_discrete and fam.q_equals_p and clock.deterministic


def _price(sc: Scenario, fam, v: float) -> dict:
    clock, U, k = sc.clock.build(fam.T), sc.utility.build(), sc.task.k
    method, route = sc.task.method, sc.run.route
    mc = _mc(sc)
    if method == "closed" and k > 0:
        raise InapplicableError("closed-form values need k = 0; use --method root")
    if method == "closed" and U.kind == "exp" and clock.kind != "terminal":
        raise InapplicableError("the exponential value needs the terminal clock")
    if method != "root" and k == 0 and U.kind == "log":
        rep = pi_log(v, fam, clock, route, **mc)
    elif method != "root" and k == 0 and U.kind == "power":
        rep = pi_power(v, U.p, fam, clock, route, **mc)
    elif method != "root" and k == 0 and U.kind == "exp" and clock.kind == "terminal":
        rep = pi_exp(v, U.alpha, fam, route, **mc)
    else:
        rep = pi_generic(v, k, fam, U, clock, route, **mc)
    out = to_plain(rep)
    if not sc.task.bounds:
        out["bound_lo"] = out["bound_hi"] = None
    out["within_bounds"] = rep.within_bounds()
    return out


def task_value(sc: Scenario) -> dict:
    fam = build_family(sc)
    out = {"valuation": _price(sc, fam, sc.task.v)}
    if sc.task.bounds:
        try:
            lo, hi = uip_bounds(sc.task.v, sc.task.k, fam)
            out["bounds"] = {"lo": lo, "hi": hi, "tail_mass": float(getattr(fam.signal, "tail_mass", 0.0))}
        except InapplicableError as exc:
            out["bounds"] = {"lo": None, "hi": None, "note": str(exc)}
    try:
        out["universal"] = to_plain(universal_value(sc.task.v, sc.task.k, fam))
    except InapplicableError as exc:
        out["universal"] = {"pi": None, "note": str(exc)}
    if sc.task.v_grid:
        grid = sorted(sc.task.v_grid)
        pis = [_price(sc, fam, v)["pi"] for v in grid]
        out["v_grid"] = {"v": grid, "pi": pis,
                         "increasing": all(b > a for a, b in zip(pis, pis[1:]) if a is not None and b is not None)}
    return out


def task_replicate(sc: Scenario, csv_path: Path | None = None) -> dict:
    fam = build_family(sc)
    rep = run_replication(fam, sc.task.v, sc.run.paths, sc.run.steps, sc.task.delta_guard, _rng(sc), sc.run.workers)
    out = to_plain(rep)
    out["tolerance"] = 0.02 * sc.task.v
    if csv_path is not None and sc.task.dump_paths:
        n = min(sc.task.dump_paths, sc.run.paths)
        b = fam.simulate(TimeGrid.uniform(fam.T, sc.run.steps), _rng(sc), np.arange(n), sc.run.workers)
        rows = (row[1:] for row in replication_rows(fam, sc.task.v, b, sc.task.delta_guard))
        write_csv(rows, csv_path)
        out["csv"] = {"path": str(csv_path.name), "paths": n}
    return out


def task_suite(sc: Scenario | None = None) -> dict:
    from .acceptance import run_all

    results = run_all(verbose=True)
    return {"criteria": [{"id": cid, "name": name, "passed": ok, "detail": detail}
                         for cid, name, ok, detail in results],
            "all_passed": all(r[2] for r in results)}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="insider-val", description="Value of inside information in complete markets.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario TOML file")
    common.add_argument("--out", help="report path (.json; .csv for replicate path dumps)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--paths", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--model", help="model id when no config is given")
    common.add_argument("--r", type=float, help="signal probability for gbm-binary")
    common.add_argument("--T", type=float)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("diagnose", parents=[common], help="arbitrage diagnostics")
    sub.add_parser("optimize", parents=[common], help="optimal expected utilities")
    val = sub.add_parser("value", parents=[common], help="indifference value")
    val.add_argument("--method", choices=["auto", "closed", "root"])
    val.add_argument("--bounds", action=argparse.BooleanOptionalAction, default=None)
    val.add_argument("--k", type=float)
    val.add_argument("--v-grid", help="comma-separated initial capitals")
    sub.add_parser("replicate", parents=[common], help="universal strategy replication")
    sub.add_parser("suite", parents=[common], help="run the acceptance battery")
    return ap


def _raw_scenarios(args) -> list[dict]:
    if args.config:
        with open(args.config, "rb") as fh:
            data = tomllib.load(fh)
        return data["scenario"] if "scenario" in data else [data]
    if not args.model:
        raise ValueError("give --config or --model")
    model = {"id": args.model}
    if args.r is not None:
        model["r"] = args.r
    elif args.model == "gbm-binary":
        model["r"] = 0.5
    if args.T is not None:
        model["T"] = args.T
    raw = {"name": args.model, "model": model}
    if args.model == "custom-discrete":
        raw["signal"] = {"atoms": [0.0, 1.0], "probs": [0.5, 0.5]}
    return [raw]


def _apply_overrides(raw: dict, args) -> dict:
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    run = raw.setdefault("run", {})
    task = raw.setdefault("task", {})
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        run["seed"] = int(env_seed)
    for name in ("seed", "workers", "paths", "steps"):
        if getattr(args, name, None) is not None:
            run[name] = getattr(args, name)
    if args.config and args.model is not None:
        raw["model"] = dict(raw.get("model", {}), id=args.model)
    if args.config and args.r is not None:
        raw["model"] = dict(raw.get("model", {}), r=args.r)
    if getattr(args, "method", None) is not None:
        task["method"] = args.method
    if getattr(args, "bounds", None) is not None:
        task["bounds"] = args.bounds
    if getattr(args, "k", None) is not None:
        task["k"] = args.k
    if getattr(args, "v_grid", None):
        task["v_grid"] = [float(x) for x in args.v_grid.split(",")]
    if task.get("kind") not in (None, args.command):
        raise ValueError(f"config task kind {task['kind']!r} does not match the {args.command!r} command")
    task["kind"] = args.command
    if args.command == "replicate" and "steps" not in run and args.steps is None:
        run["steps"] = 4096
    if args.command == "replicate" and "paths" not in run and args.paths is None:
        run["paths"] = 1000
    return raw


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    t0 = time.perf_counter()
    started = datetime.now(timezone.utc).isoformat()
    try:
        if args.command == "suite":
            scenarios = []
        else:
            raws = [_apply_overrides(r, args) for r in _raw_scenarios(args)]
            scenarios = parse_config({"scenario": raws})
    except (ValidationError, ValueError, OSError, tomllib.TOMLDecodeError, KeyError, TypeError) as exc:
        print(f"insider-val: invalid configuration: {exc}", file=sys.stderr)
        return 2

    out_path = Path(args.out) if args.out else None
    csv_path = None
    if out_path is not None and out_path.suffix == ".csv":
        csv_path, out_path = out_path, out_path.with_suffix(".report.json")
    if out_path is not None:
        try:
            out_path.parent.mkdir(parents=True, exist_ok=True)
            target = out_path if out_path.exists() else out_path.parent
            if out_path.is_dir() or not os.access(target, os.W_OK):
                raise PermissionError(f"{target} is not writable")
        except OSError as exc:
            print(f"insider-val: cannot write {out_path}: {exc}", file=sys.stderr)
            return 4

    results = []
    try:
        if args.command == "suite":
            body = task_suite()
            results.append({"scenario": "acceptance", "task": "suite", "output": body})
        for i, sc in enumerate(scenarios):
            if args.command == "diagnose":
                body = task_diagnose(sc)
            elif args.command == "optimize":
                body = task_optimize(sc)
            elif args.command == "value":
                body = task_value(sc)
            else:
                cp = None if csv_path is None else (
                    csv_path if len(scenarios) == 1 else csv_path.with_name(f"{csv_path.stem}_{sc.name}.csv"))
                body = task_replicate(sc, cp)
            results.append({"scenario": sc.name, "task": args.command, "output": body})
    except (SolverError, ConsistencyError) as exc:
        print(f"insider-val: solver error: {exc}", file=sys.stderr)
        return 3
    except (InapplicableError, InsiderValError, ValueError) as exc:
        print(f"insider-val: {exc}", file=sys.stderr)
        return 2

    report = {
        "tool": "insider-val",
        "version": __version__,
        "command": args.command,
        "config": [sc.model_dump(mode="json") for sc in scenarios],
        "results": to_plain(results),
    }
    validate(report)
    meta = {"started": started, "wall_clock_s": time.perf_counter() - t0,
            "seeds": [sc.run.seed for sc in scenarios]}
    if out_path is not None:
        try:
            write_json(report, out_path, meta)
        except OSError as exc:
            print(f"insider-val: cannot write {out_path}: {exc}", file=sys.stderr)
            return 4
    else:
        from .report import dumps

        print(dumps(report))
    if args.command == "suite":
        return 0 if results[0]["output"]["all_passed"] else 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
