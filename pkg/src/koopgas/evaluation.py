"""Error metrics and the network-level error check of a dispatch.

The network-level error (NLE) feeds the dispatched source pressures and
load withdrawals into the nonlinear network simulator, hourly-averages both
the dispatch and the simulated states, and compares them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dispatch_opt import DispatchSolution, GasDispatchSpec
from .errors import HorizonMismatch, LengthMismatch
from .gas_dynamics import NONLINEAR
from .transient_sim import M_BASE, P_BASE, BoundaryProfile, Trajectory, simulate_network

MAPE_FLOOR = 1e-9
VIOLATION_TOL = 1e-6


def metrics(reference, candidate, base: float):
    """Return ``(rmse, mape_percent, normalized_error)``.

    MAPE skips reference entries with ``|ref| <= 1e-9 * base``; it is 0 when
    every entry is skipped.
    """
    ref = np.asarray(reference, dtype=float)
    cand = np.asarray(candidate, dtype=float)
    if ref.shape != cand.shape:
        raise LengthMismatch(f"series shapes differ: {ref.shape} vs {cand.shape}")
    if ref.size == 0:
        raise LengthMismatch("series are empty")
    err = cand - ref
    rmse = float(np.sqrt(np.mean(err * err)))
    keep = np.abs(ref) > MAPE_FLOOR * base
    mape = float(np.mean(np.abs(err[keep]) / np.abs(ref[keep])) * 100) if keep.any() else 0.0
    return rmse, mape, err / base


def hourly_average(series, steps_per_hour: int) -> np.ndarray:
    """Average consecutive blocks of ``steps_per_hour`` entries (along axis 0)."""
    a = np.asarray(series, dtype=float)
    if a.shape[0] % steps_per_hour:
        raise HorizonMismatch(f"{a.shape[0]} steps are not a whole number of hours")
    return a.reshape(a.shape[0] // steps_per_hour, steps_per_hour, *a.shape[1:]).mean(axis=1)


@dataclass
class ErrorReport:
    """Dispatch-versus-simulation errors over one horizon.

    Pressures are the hourly-averaged pipeline outlet pressures (Pa), flows
    the hourly-averaged inlet mass flows (kg/s).
    """

    gas_model: str
    vbar: float | None
    dt: float
    pipelines: dict  # pid -> {"p_rmse","p_mape","m_rmse","m_mape"}
    overall: dict
    source_max_error: dict  # source -> max |normalized injection error|
    planned_tons: dict
    simulated_tons: dict
    deviation_tons: float
    signed_deviation_tons: float
    deviation_percent: float
    violations: list = field(default_factory=list)
    hourly: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hourly"] = {pid: {k: np.asarray(v).tolist() for k, v in s.items()} for pid, s in self.hourly.items()}
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def boundary_from_solution(sol: DispatchSolution, sim_dt: float) -> BoundaryProfile:
    """Zero-order-hold the hourly controls onto the simulator grid."""
    per_hour = 3600.0 / sim_dt
    if abs(per_hour - round(per_hour)) > 1e-9:
        raise HorizonMismatch("simulation step must divide one hour")
    n = int(round(per_hour))
    times = sim_dt * np.arange(1, sol.hours * n + 1)
    return BoundaryProfile(times, np.repeat(sol.source_pressure, n, axis=0), np.repeat(sol.withdrawal, n, axis=0))


def simulate_dispatch(sol: DispatchSolution, gas: GasDispatchSpec, sim_dt: float = 900.0) -> Trajectory:
    """Nonlinear network response to the dispatched controls, from the dispatch's initial state."""
    bnd = boundary_from_solution(sol, sim_dt)
    return simulate_network(gas.network, sim_dt, bnd, gas.initial_state, mode=NONLINEAR)


def _violations(traj: Trajectory, gas: GasDispatchSpec) -> list:
    out = []
    for pipe in gas.network.pipelines:
        prm = pipe.params
        checks = (
            ("m_in", traj.inlet_mfr(pipe.id), prm.mfr_min, prm.mfr_max, M_BASE),
            ("m_out", traj.outlet_mfr(pipe.id), prm.mfr_min, prm.mfr_max, M_BASE),
            ("p_in", traj.inlet_pressure(pipe.id), prm.p_min, prm.p_max, P_BASE),
            ("p_out", traj.outlet_pressure(pipe.id), prm.p_min, prm.p_max, P_BASE),
        )
        for name, series, lo, hi, base in checks:
            for step in range(1, series.size):
                v = float(series[step])
                if v < lo - VIOLATION_TOL * base:
                    out.append({"element": pipe.id, "quantity": name, "step": step, "bound": "min",
                                "limit": lo, "value": v})
                elif v > hi + VIOLATION_TOL * base:
                    out.append({"element": pipe.id, "quantity": name, "step": step, "bound": "max",
                                "limit": hi, "value": v})
    for i, node in enumerate(gas.network.nodes):
        series = traj.node_pressure[:, i]
        for step in range(1, series.size):
            v = float(series[step])
            if v < node.p_min - VIOLATION_TOL * P_BASE:
                out.append({"element": node.id, "quantity": "pressure", "step": step, "bound": "min",
                            "limit": node.p_min, "value": v})
            elif v > node.p_max + VIOLATION_TOL * P_BASE:
                out.append({"element": node.id, "quantity": "pressure", "step": step, "bound": "max",
                            "limit": node.p_max, "value": v})
    return out


def nle_evaluate(sol: DispatchSolution, gas: GasDispatchSpec, sim_dt: float = 900.0,
                 traj: Trajectory | None = None) -> ErrorReport:
    """Network-level error of a dispatch.

    Parameters
    ----------
    sol : DispatchSolution
    gas : GasDispatchSpec
        Must describe the network and initial state the dispatch used.
    sim_dt : float
        Simulator step in seconds.
    traj : Trajectory, optional
        Precomputed simulation of ``sol``; simulated here when omitted.
    """
    if sol.injection.shape[0] != sol.hours * sol.steps_per_interval:
        raise HorizonMismatch("solution steps do not cover its horizon")
    if traj is None:
        traj = simulate_dispatch(sol, gas, sim_dt)
    n_sim = int(round(3600.0 / traj.dt))
    if traj.steps != sol.hours * n_sim:
        raise HorizonMismatch(f"simulation covers {traj.steps} steps, expected {sol.hours * n_sim}")
    spi = sol.steps_per_interval

    pipes, hourly = {}, {}
    all_p = ([], [])
    all_m = ([], [])
    for pipe in gas.network.pipelines:
        d = sol.pipes[pipe.id]
        plan_p = hourly_average(d["p_out"], spi)
        plan_m = hourly_average(d["m_in"], spi)
        sim_p = hourly_average(traj.outlet_pressure(pipe.id)[1:], n_sim)
        sim_m = hourly_average(traj.inlet_mfr(pipe.id)[1:], n_sim)
        p_rmse, p_mape, p_err = metrics(sim_p, plan_p, P_BASE)
        m_rmse, m_mape, m_err = metrics(sim_m, plan_m, M_BASE)
        pipes[pipe.id] = {"p_rmse": p_rmse, "p_mape": p_mape, "m_rmse": m_rmse, "m_mape": m_mape}
        hourly[pipe.id] = {"p_plan": plan_p, "p_sim": sim_p, "m_plan": plan_m, "m_sim": sim_m,
                           "p_norm_err": p_err, "m_norm_err": m_err}
        all_p[0].append(sim_p)
        all_p[1].append(plan_p)
        all_m[0].append(sim_m)
        all_m[1].append(plan_m)
    p_rmse, p_mape, _ = metrics(np.concatenate(all_p[0]), np.concatenate(all_p[1]), P_BASE)
    m_rmse, m_mape, _ = metrics(np.concatenate(all_m[0]), np.concatenate(all_m[1]), M_BASE)
    overall = {"p_rmse": p_rmse, "p_mape": p_mape, "m_rmse": m_rmse, "m_mape": m_mape}

    src_cols = [traj.node_ids.index(s) for s in sol.source_ids]
    sim_inj = traj.injection[1:, src_cols]
    planned_mass = sol.extraction_mass()
    sim_mass = sim_inj.reshape(sol.hours, n_sim, -1).sum(axis=1) * traj.dt
    plan_avg = hourly_average(sol.injection, spi)
    sim_avg = hourly_average(sim_inj, n_sim)
    src_err = {s: float(np.max(np.abs(plan_avg[:, j] - sim_avg[:, j]))) / M_BASE
               for j, s in enumerate(sol.source_ids)}
    diff = planned_mass - sim_mass
    dev = float(np.sum(np.abs(diff))) / 1000.0
    signed = float(np.sum(diff)) / 1000.0
    total = float(np.sum(planned_mass)) / 1000.0
    return ErrorReport(
        gas_model=sol.gas_model,
        vbar=sol.vbar,
        dt=sol.dt,
        pipelines=pipes,
        overall=overall,
        source_max_error=src_err,
        planned_tons={s: float(planned_mass[:, j].sum()) / 1000 for j, s in enumerate(sol.source_ids)},
        simulated_tons={s: float(sim_mass[:, j].sum()) / 1000 for j, s in enumerate(sol.source_ids)},
        deviation_tons=dev,
        signed_deviation_tons=signed,
        deviation_percent=100.0 * dev / total if total else 0.0,
        violations=_violations(traj, gas),
        hourly=hourly,
    )


def solution_from_trajectory(traj: Trajectory, gas: GasDispatchSpec, hours: int) -> DispatchSolution:
    """Package a simulated trajectory as a dispatch (electric side empty).

    Used to check that the NLE procedure returns zero on self-consistent input.
    """
    n = int(round(3600.0 / traj.dt))
    net = gas.network
    src_cols = [traj.node_ids.index(s) for s in net.sources]
    load_cols = [traj.node_ids.index(s) for s in net.loads]
    pipes = {
        pid: {"p_in": traj.inlet_pressure(pid)[1:], "m_in": traj.inlet_mfr(pid)[1:],
              "p_out": traj.outlet_pressure(pid)[1:], "m_out": traj.outlet_mfr(pid)[1:]}
        for pid in traj.pipe_pressure
    }
    return DispatchSolution(
        gas_model=NONLINEAR, vbar=None, hours=hours, dt=traj.dt,
        generator_ids=(), bus_ids=(), p2g_ids=(), source_ids=tuple(net.sources), load_ids=tuple(net.loads),
        node_ids=traj.node_ids,
        generation=np.zeros((hours, 0)), p2g=np.zeros((hours, 0)), theta=np.zeros((hours, 0)),
        source_pressure=traj.node_pressure[1::n, src_cols],
        withdrawal=traj.withdrawal[1::n, load_cols],
        node_pressure=traj.node_pressure[1:], injection=traj.injection[1:, src_cols],
        pipes=pipes, objective=0.0, generation_cost=0.0, gas_cost=0.0,
    )


# ---------------------------------------------------------------------------
# tables


def write_table(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


NLE_HEADER = ["p_rmse_pa", "p_mape_pct", "m_rmse_kgs", "m_mape_pct", "deviation_t", "signed_deviation_t",
              "deviation_pct", "violations", "objective", "solve_time_s", "n_vars", "n_eq"]


def _nle_row(rep: ErrorReport, sol: DispatchSolution):
    o = rep.overall
    return [o["p_rmse"], o["p_mape"], o["m_rmse"], o["m_mape"], rep.deviation_tons, rep.signed_deviation_tons,
            rep.deviation_percent, len(rep.violations), sol.objective, float(sol.stats.get("solve_time", 0.0)),
            sol.stats.get("n_vars", 0), sol.stats.get("n_eq", 0)]


def compare_models(runs: list, out_dir, training_rows: list | None = None) -> dict:
    """Write comparison tables for a set of evaluated dispatches.

    Parameters
    ----------
    runs : list of (label, DispatchSolution, ErrorReport)
        Global-model runs at different resolutions and local-model runs at
        different average velocities, in any order.
    out_dir : path
    training_rows : list of dict, optional
        Per-model identification errors (keys as in ``TRAINING_HEADER``).

    Returns
    -------
    dict
        Table name to written path.
    """
    out_dir = Path(out_dir)
    paths = {}
    if training_rows:
        paths["training"] = write_table(out_dir / "table_training.csv", TRAINING_HEADER,
                                        [[r[k] for k in TRAINING_HEADER] for r in training_rows])
    glob = sorted((r for r in runs if r[1].gas_model == "global"), key=lambda r: r[1].dt)
    loc = sorted((r for r in runs if r[1].gas_model == "local"), key=lambda r: r[1].vbar)
    if glob:
        paths["global"] = write_table(out_dir / "table_global_resolution.csv",
                                      ["resolution_min"] + NLE_HEADER,
                                      [[sol.dt / 60] + _nle_row(rep, sol) for _, sol, rep in glob])
    if loc:
        paths["local"] = write_table(out_dir / "table_local_vbar.csv", ["vbar_ms"] + NLE_HEADER,
                                     [[sol.vbar] + _nle_row(rep, sol) for _, sol, rep in loc])
    rows = []
    for label, sol, rep in runs:
        for s in sol.source_ids:
            rows.append([label, s, rep.planned_tons[s], rep.simulated_tons[s],
                         rep.planned_tons[s] - rep.simulated_tons[s], rep.source_max_error[s]])
        rows.append([label, "total", sum(rep.planned_tons.values()), sum(rep.simulated_tons.values()),
                     rep.deviation_tons, max(rep.source_max_error.values())])
    paths["sources"] = write_table(out_dir / "table_sources.csv",
                                   ["run", "source", "planned_t", "simulated_t", "deviation_t", "max_norm_error"],
                                   rows)
    rows = []
    for label, sol, rep in runs:
        for pid, s in rep.hourly.items():
            for h in range(len(s["p_norm_err"])):
                rows.append([label, pid, h, s["p_plan"][h], s["p_sim"][h], s["p_norm_err"][h],
                             s["m_plan"][h], s["m_sim"][h], s["m_norm_err"][h]])
    paths["hourly"] = write_table(out_dir / "hourly_errors.csv",
                                  ["run", "pipeline", "hour", "p_plan_pa", "p_sim_pa", "p_norm_err",
                                   "m_plan_kgs", "m_sim_kgs", "m_norm_err"], rows)
    return paths


TRAINING_HEADER = ["pipeline", "resolution_min", "dx", "du", "part", "p_rmse_pu", "p_mape_pct", "m_rmse_pu",
                   "m_mape_pct", "p_max_err_pu", "m_max_err_pu", "spectral_radius"]
