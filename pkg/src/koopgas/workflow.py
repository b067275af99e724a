"""End-to-end runs over a dispatch scenario: per-pipeline training, dispatch, NLE."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import Scenario
from .dispatch_opt import GLOBAL, dispatch
from .evaluation import TRAINING_HEADER, metrics, nle_evaluate
from .gas_dynamics import LOCAL
from .koopman_id import build_regression, edmd_fit, get_observables, save_model
from .snapshots import generate_snapshots

log = logging.getLogger(__name__)


def _train_one(args):
    scenario, pipe_id, index, dt, seed, path = args
    t = scenario.training
    pipe = scenario.gas.network.pipeline(pipe_id)
    g0 = scenario.gas.initial_state.grids[pipe_id]
    exc = t.excitation_for(pipe_id, float(g0.pressures[0]), float(g0.mfrs[0]))
    snaps = generate_snapshots(pipe.params, exc, t.count, dt, seed=(seed + index) % 2**64, K=pipe.K)
    obs = get_observables(t.observables)
    reg = build_regression(snaps, obs, t.delays)
    model = edmd_fit(reg, True, t.epsilon, t.mode, obs.name, dt, snaps.p_base, snaps.m_base, pipe_id)
    save_model(model, path)
    rows = []
    Y, Z = reg.Y, reg.Z
    pred = Z @ model.weights()
    for part, sl in (("train", slice(0, reg.split)), ("test", slice(reg.split, None))):
        y, p = Y[sl, :2], pred[sl, :2]
        pr, pm, pe = metrics(y[:, 0], p[:, 0], 1.0)
        mr, mm, me = metrics(y[:, 1], p[:, 1], 1.0)
        rows.append({
            "pipeline": pipe_id, "resolution_min": dt / 60, "dx": t.delays.dx, "du": t.delays.du, "part": part,
            "p_rmse_pu": pr, "p_mape_pct": pm, "m_rmse_pu": mr, "m_mape_pct": mm,
            "p_max_err_pu": float(np.max(np.abs(pe))), "m_max_err_pu": float(np.max(np.abs(me))),
            "spectral_radius": model.stability["certified_spectral_radius"],
        })
    return str(path), rows


def train_scenario_models(scenario: Scenario, root, dts=None, seed: int | None = None, jobs: int = 1) -> list:
    """Train and save one model per pipeline and resolution; returns training-metric rows.

    The rows are also written to ``root/training_metrics.json``.
    """
    root = Path(root)
    dts = [scenario.horizon.dt] if dts is None else list(dts)
    seed = scenario.training.seed if seed is None else seed
    tasks = []
    for dt in dts:
        for i, pipe in enumerate(scenario.gas.network.pipelines):
            tasks.append((scenario, pipe.id, i, float(dt), seed, scenario.model_path(root, pipe.id, dt)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_train_one, tasks))
    else:
        results = [_train_one(t) for t in tasks]
    rows = [r for _, rs in results for r in rs]
    root.mkdir(parents=True, exist_ok=True)
    metrics_path = root / "training_metrics.json"
    old = json.loads(metrics_path.read_text()) if metrics_path.exists() else []
    keep = [r for r in old if r["resolution_min"] not in {dt / 60 for dt in dts}]
    metrics_path.write_text(json.dumps(keep + rows, indent=1))
    return rows


def load_training_rows(root) -> list:
    path = Path(root) / "training_metrics.json"
    if not path.exists():
        return []
    return [{k: r[k] for k in TRAINING_HEADER} for r in json.loads(path.read_text())]


def run_global(scenario: Scenario, root, dt: float, sim_dt: float = 900.0):
    """Global-model dispatch at resolution ``dt`` and its NLE; returns ``(solution, report)``."""
    sc = scenario.with_dt(dt)
    gas = sc.load_models(root, dt)
    sol, _ = dispatch(sc.power, sc.coupling, gas, sc.horizon, GLOBAL)
    return sol, nle_evaluate(sol, gas, sim_dt)


def run_local(scenario: Scenario, vbar: float, dt: float | None = None, sim_dt: float = 900.0):
    sc = scenario if dt is None else scenario.with_dt(dt)
    sol, _ = dispatch(sc.power, sc.coupling, sc.gas, sc.horizon, LOCAL, vbar)
    return sol, nle_evaluate(sol, sc.gas, sim_dt)


def _run(args):
    kind, scenario, root, key, sim_dt = args
    if kind == GLOBAL:
        return (f"global {int(round(key / 60))}min",) + run_global(scenario, root, key, sim_dt)
    return (f"local vbar={key:g}",) + run_local(scenario, key, None, sim_dt)


def run_comparison(scenario: Scenario, root, out_dir=None, sim_dt: float = 900.0, jobs: int = 1) -> list:
    """Global dispatch at every configured resolution and local dispatch at every ``vbar``.

    Models are read from ``root``. When ``out_dir`` is given the comparison
    tables are written there. Returns ``[(label, solution, report), ...]``.
    """
    from .evaluation import compare_models

    tasks = [(GLOBAL, scenario, root, m * 60.0, sim_dt) for m in scenario.resolutions]
    tasks += [(LOCAL, scenario, root, v, sim_dt) for v in scenario.vbars]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            runs = list(ex.map(_run, tasks))
    else:
        runs = [_run(t) for t in tasks]
    if out_dir is not None:
        compare_models(runs, out_dir, load_training_rows(root))
    return runs
