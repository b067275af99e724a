"""Command-line entry point.

Exit codes: 0 success, 1 domain error (infeasible, diverged, bound violations
found by ``evaluate``), 2 usage or configuration error. ``KOOPGAS_SEED``
overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import re
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import (
    ConfigError,
    file_hash,
    load_network_scenario,
    load_pipeline_config,
    load_scenario,
    read_json,
    resolve,
)
from .errors import KoopgasError, SchemaMismatch
from .gas_dynamics import LOCAL, NONLINEAR, steady_state_profile

log = logging.getLogger("koopgas")

SEED_ENV = "KOOPGAS_SEED"


class UsageError(Exception):
    """Bad flag combination detected after parsing."""


def _seed(value) -> int | None:
    env = os.environ.get(SEED_ENV)
    raw = env if env is not None else value
    if raw is None:
        return None
    try:
        seed = int(raw)
    except (TypeError, ValueError):
        raise UsageError(f"seed must be an integer, got {raw!r}") from None
    if not 0 <= seed < 2**64:
        raise UsageError("seed must be an unsigned 64-bit integer")
    return seed


def _duration(text: str) -> float:
    """Seconds from ``900``, ``900s``, ``15m``, ``15min`` or ``1h``."""
    m = re.fullmatch(r"\s*([0-9.]+)\s*(s|m|min|h)?\s*", str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r}")
    scale = {None: 1.0, "s": 1.0, "m": 60.0, "min": 60.0, "h": 3600.0}[m.group(2)]
    value = float(m.group(1)) * scale
    if value <= 0:
        raise argparse.ArgumentTypeError("duration must be positive")
    return value


def _minutes_list(text: str) -> list:
    return [_duration(t if re.search(r"[a-z]", t) else t + "m") for t in text.split(",") if t.strip()]


def _manifest(out: Path, command: str, settings: dict, inputs) -> Path:
    inputs = [Path(p) for p in inputs]
    data = {
        "command": command,
        "settings": settings,
        "inputs": {str(p): file_hash(p) for p in inputs},
        "inputs_hash": file_hash(*inputs) if inputs else None,
        "versions": {"koopgas": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"manifest_{command.split()[0]}.json"
    path.write_text(json.dumps(data, indent=1, sort_keys=True))
    return path


def _check_mode(args):
    if args.mode == LOCAL and args.vbar is None:
        raise UsageError("--mode local requires --vbar")
    if args.mode != LOCAL and args.vbar is not None:
        raise UsageError("--vbar applies to --mode local only")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    from .transient_sim import BoundaryProfile, network_steady_state, simulate_network, simulate_pipeline

    _check_mode(args)
    path = resolve(args.config)
    out = Path(args.out)
    if args.kind == "pipeline":
        sc = load_pipeline_config(path)
        dt = args.dt or sc.dt
        steps = int(round(sc.hours * 3600 / dt))
        times = dt * np.arange(1, steps + 1)
        boundary = BoundaryProfile(times, np.full(steps, sc.inlet_pressure),
                                   np.array([sc.outlet_mfr_at(t) for t in times]))
        K = sc.segments or sc.params.default_segments()
        init = steady_state_profile(sc.params, sc.inlet_pressure, sc.initial_mfr, K)
        traj = simulate_pipeline(sc.params, K, dt, boundary, init, args.mode, args.vbar)
        pid = sc.params.name
        print(f"final inlet MFR {traj.inlet_mfr(pid)[-1]:.6f} kg/s, "
              f"final outlet pressure {traj.outlet_pressure(pid)[-1]:.2f} Pa")
    else:
        sc = load_network_scenario(path)
        dt = args.dt or sc.dt
        sc = type(sc)(sc.network, dt, sc.hours, sc.source_pressures, sc.withdrawals)
        boundary = sc.boundary()
        init = network_steady_state(sc.network, boundary.inlet_pressure[0], boundary.outlet_mfr[0])
        traj = simulate_network(sc.network, dt, boundary, init.grids, mode=args.mode, vbar=args.vbar)
        print(f"simulated {traj.steps} steps over {len(sc.network.pipelines)} pipelines")
    paths = traj.to_csv(out)
    _manifest(out, f"simulate {args.kind}", {"mode": args.mode, "vbar": args.vbar, "dt": dt}, [path])
    print(f"wrote {len(paths)} trajectory files to {out}")
    return 0


def _pipeline_source(path, pipe_id):
    """Pipeline parameters, segment count and excitation from any config kind."""
    d = read_json(path)
    if "pipeline" in d:
        sc = load_pipeline_config(path)
        if pipe_id not in (None, sc.params.name):
            raise ConfigError(f"pipeline {pipe_id!r} not in {path}; it defines {sc.params.name!r}")
        return sc.params, sc.segments or sc.params.default_segments(), sc.excitation
    if "power" in d:
        sc = load_scenario(path)
        if pipe_id is None:
            raise UsageError("--pipeline is required with a scenario config")
        try:
            pipe = sc.gas.network.pipeline(pipe_id)
        except KoopgasError as exc:
            raise ConfigError(str(exc)) from exc
        g0 = sc.gas.initial_state.grids[pipe_id]
        return pipe.params, pipe.K, sc.training.excitation_for(pipe_id, float(g0.pressures[0]),
                                                               float(g0.mfrs[0]))
    raise ConfigError(f"{path}: neither a pipeline nor a scenario config")


def cmd_generate_data(args) -> int:
    from .snapshots import generate_snapshots

    seed = _seed(args.seed)
    path = resolve(args.config)
    params, K, exc = _pipeline_source(path, args.pipeline)
    snaps = generate_snapshots(params, exc, args.count, args.dt, seed=seed, K=K)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    snaps.to_csv(out)
    _manifest(out.parent, "generate-data",
              {"pipeline": params.name, "count": args.count, "dt": args.dt, "seed": seed, "out": out.name}, [path])
    print(f"wrote {len(snaps)} snapshots to {out}")
    return 0


def cmd_train(args) -> int:
    from .evaluation import metrics
    from .koopman_id import DelayConfig, build_regression, edmd_fit, get_observables, save_model
    from .snapshots import SnapshotSet

    data = Path(args.data)
    if not data.exists():
        raise ConfigError(f"data file not found: {data}")
    snaps = SnapshotSet.from_csv(data)
    obs = get_observables(args.obs)
    delays = DelayConfig(args.dx, args.du)
    reg = build_regression(snaps, obs, delays)
    stability = args.stability == "on"
    model = edmd_fit(reg, stability, args.epsilon, args.stability_mode, obs.name, snaps.dt,
                     snaps.p_base, snaps.m_base, snaps.pipeline_id)
    out = Path(args.out)
    save_model(model, out)
    pred = reg.Z @ model.weights()
    for part, sl in (("train", slice(0, reg.split)), ("test", slice(reg.split, None))):
        y, p = reg.Y[sl], pred[sl]
        pr, pm, _ = metrics(y[:, 0], p[:, 0], 1.0)
        mr, mm, _ = metrics(y[:, 1], p[:, 1], 1.0)
        print(f"{part}: pressure RMSE {pr:.3e} p.u. MAPE {pm:.4f}%  MFR RMSE {mr:.3e} p.u. MAPE {mm:.4f}%")
    print(f"spectral radius {model.stability['certified_spectral_radius']:.6f}")
    _manifest(out.parent, "train", {"dx": args.dx, "du": args.du, "stability": args.stability,
                                    "epsilon": args.epsilon, "obs": obs.name, "out": out.name}, [data])
    return 0


def cmd_train_scenario(args) -> int:
    from .workflow import train_scenario_models

    seed = _seed(args.seed)
    sc = load_scenario(args.scenario)
    dts = _minutes_list(args.resolutions) if args.resolutions else [m * 60.0 for m in sc.resolutions]
    rows = train_scenario_models(sc, args.models, dts, seed, args.jobs)
    for r in rows:
        if r["part"] == "test":
            print(f"{r['pipeline']} {r['resolution_min']:g}min: test pressure RMSE {r['p_rmse_pu']:.2e} p.u., "
                  f"MFR RMSE {r['m_rmse_pu']:.2e} p.u., spectral radius {r['spectral_radius']:.5f}")
    _manifest(Path(args.models), "train-scenario", {"resolutions_s": dts, "seed": seed}, [sc.path])
    return 0


def cmd_dispatch(args) -> int:
    from .dispatch_opt import GLOBAL, dispatch, save_solution

    if args.gas_model == LOCAL and args.vbar is None:
        raise UsageError("--gas-model local requires --vbar")
    sc = load_scenario(args.scenario)
    if args.dt:
        sc = sc.with_dt(args.dt)
    gas = sc.gas
    if args.gas_model == GLOBAL:
        gas = sc.load_models(args.models)
    sol, _ = dispatch(sc.power, sc.coupling, gas, sc.horizon, args.gas_model, args.vbar)
    out = Path(args.out)
    save_solution(sol, out)
    st = sol.stats
    print(f"objective {sol.objective:.2f}  ({st['n_vars']} variables, {st['n_eq']} equalities, "
          f"{st['n_ub']} inequalities, solved in {st['solve_time']:.3f} s by {st['method']})")
    inputs = [sc.path] + ([sc.model_path(args.models, p.id, sc.horizon.dt) for p in sc.gas.network.pipelines]
                          if args.gas_model == GLOBAL else [])
    _manifest(out, "dispatch", {"gas_model": args.gas_model, "vbar": args.vbar, "dt": sc.horizon.dt}, inputs)
    return 0


def cmd_evaluate(args) -> int:
    from .dispatch_opt import load_solution
    from .evaluation import compare_models, nle_evaluate
    from .workflow import load_training_rows

    sol_dir = Path(args.solution)
    if not (sol_dir / "solution.json").exists():
        raise ConfigError(f"no solution.json in {sol_dir}")
    sc = load_scenario(args.scenario)
    sol = load_solution(sol_dir)
    rep = nle_evaluate(sol, sc.gas, args.sim_dt)
    out = Path(args.out) if args.out else sol_dir
    rep.save(out / "nle_report.json")
    label = f"global {sol.dt / 60:g}min" if sol.gas_model == "global" else f"local vbar={sol.vbar:g}"
    compare_models([(label, sol, rep)], out, load_training_rows(args.models) if args.models else None)
    o = rep.overall
    print(f"pressure RMSE {o['p_rmse']:.1f} Pa MAPE {o['p_mape']:.4f}%  "
          f"MFR RMSE {o['m_rmse']:.4f} kg/s MAPE {o['m_mape']:.4f}%")
    print(f"source extraction deviation {rep.deviation_tons:.3f} t ({rep.deviation_percent:.3f}%)")
    _manifest(out, "evaluate", {"sim_dt": args.sim_dt}, [sc.path, sol_dir / "solution.json"])
    if rep.violations:
        print(f"{len(rep.violations)} simulated bound violations", file=sys.stderr)
        return 1
    return 0


def cmd_compare(args) -> int:
    from .workflow import run_comparison, train_scenario_models

    seed = _seed(args.seed)
    sc = load_scenario(args.scenario)
    if args.train:
        train_scenario_models(sc, args.models, [m * 60.0 for m in sc.resolutions], seed, args.jobs)
    runs = run_comparison(sc, args.models, args.out, args.sim_dt, args.jobs)
    for label, sol, rep in runs:
        o = rep.overall
        print(f"{label:>16}: pressure MAPE {o['p_mape']:.4f}%  MFR MAPE {o['m_mape']:.4f}%  "
              f"deviation {rep.deviation_tons:.2f} t  violations {len(rep.violations)}")
    _manifest(Path(args.out), "compare", {"sim_dt": args.sim_dt, "seed": seed, "train": args.train}, [sc.path])
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="koopgas", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"koopgas {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="nonlinear or locally linearized transient simulation")
    s.add_argument("kind", choices=("pipeline", "network"))
    s.add_argument("--config", required=True, help="config path or bundled config name")
    s.add_argument("--mode", choices=(NONLINEAR, LOCAL), default=NONLINEAR)
    s.add_argument("--vbar", type=float, help="average velocity in m/s (local mode)")
    s.add_argument("--dt", type=_duration, help="time step, e.g. 15m (default from config)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("generate-data", help="snapshots of one pipeline under random excitation")
    s.add_argument("--config", default="fig1_pipeline.json")
    s.add_argument("--pipeline", help="pipeline id (required for scenario configs)")
    s.add_argument("--count", type=int, default=6400)
    s.add_argument("--dt", type=_duration, default=900.0)
    s.add_argument("--seed", default="0")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_generate_data)

    s = sub.add_parser("train", help="fit a Koopman model from a snapshot CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--dx", type=int, default=3)
    s.add_argument("--du", type=int, default=2)
    s.add_argument("--stability", choices=("on", "off"), default="on")
    s.add_argument("--stability-mode", choices=("sum", "per_block", "scaled"), default="sum")
    s.add_argument("--epsilon", type=float, default=1e-3)
    s.add_argument("--obs", default="v5a", help="observable set: v5a|c4 (or pressure|full|state)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-scenario", help="train every pipeline of a scenario")
    s.add_argument("--scenario", default="desk7_scenario.json")
    s.add_argument("--models", required=True, help="model directory")
    s.add_argument("--resolutions", help="comma-separated minutes (default from scenario)")
    s.add_argument("--seed", default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_train_scenario)

    s = sub.add_parser("dispatch", help="solve the joint electricity-gas dispatch LP")
    s.add_argument("--scenario", default="desk7_scenario.json")
    s.add_argument("--gas-model", choices=("global", "local"), default="global")
    s.add_argument("--vbar", type=float)
    s.add_argument("--models", default="models", help="model directory (global gas model)")
    s.add_argument("--dt", type=_duration, help="gas model resolution (default from scenario)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dispatch)

    s = sub.add_parser("evaluate", help="network-level error of a saved dispatch")
    s.add_argument("--solution", required=True)
    s.add_argument("--scenario", default="desk7_scenario.json")
    s.add_argument("--models", help="model directory, for the training table")
    s.add_argument("--sim-dt", type=_duration, default=900.0)
    s.add_argument("--out", help="report directory (default: the solution directory)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="global vs local dispatch comparison tables")
    s.add_argument("--scenario", default="desk7_scenario.json")
    s.add_argument("--models", required=True)
    s.add_argument("--train", action="store_true", help="train the models first")
    s.add_argument("--seed", default=None)
    s.add_argument("--sim-dt", type=_duration, default=900.0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, SchemaMismatch, FileNotFoundError) as exc:
        print(f"koopgas: error: {exc}", file=sys.stderr)
        return 2
    except KoopgasError as exc:
        print(f"koopgas: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
