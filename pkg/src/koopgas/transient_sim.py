"""Backward-Euler transient simulation of pipelines and gas networks.

Every time step solves one sparse Newton system covering all pipeline grids
of the network together with the node unknowns (pressure at junction and
load nodes, injection at source nodes).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import DomainError, NewtonDivergence, NonPhysicalState, TopologyError
from .gas_dynamics import LOCAL, NONLINEAR, GridState, PipelineParams, friction_derivatives
from .network import SOURCE, GasNetworkSpec, single_pipeline_network

log = logging.getLogger(__name__)

P_BASE = 5.0e6
M_BASE = 10.0

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 10


@dataclass(frozen=True)
class BoundaryProfile:
    """Prescribed boundary values, one row per time step.

    ``inlet_pressure`` has one column per source node and ``outlet_mfr`` one
    column per load node (1-D arrays are accepted for a single pipeline).
    Row ``i`` applies at ``times[i]``, the end of step ``i``.
    """

    times: np.ndarray
    inlet_pressure: np.ndarray
    outlet_mfr: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        p = np.asarray(self.inlet_pressure, dtype=float)
        m = np.asarray(self.outlet_mfr, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if m.ndim == 1:
            m = m[:, None]
        if not (t.ndim == 1 and p.shape[0] == t.size == m.shape[0]):
            raise DomainError("boundary arrays must share their length")
        if t.size == 0:
            raise DomainError("boundary profile is empty")
        if np.any(p <= 0):
            raise DomainError("prescribed pressures must be positive")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise DomainError("boundary times must increase")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "inlet_pressure", p)
        object.__setattr__(self, "outlet_mfr", m)

    @classmethod
    def constant(cls, dt: float, steps: int, inlet_pressure, outlet_mfr) -> "BoundaryProfile":
        times = dt * np.arange(1, steps + 1)
        p = np.tile(np.atleast_1d(np.asarray(inlet_pressure, dtype=float)), (steps, 1))
        m = np.tile(np.atleast_1d(np.asarray(outlet_mfr, dtype=float)), (steps, 1))
        return cls(times, p, m)

    @property
    def dt(self) -> float:
        if self.times.size > 1:
            return float(self.times[1] - self.times[0])
        return float(self.times[0])

    def __len__(self):
        return self.times.size


@dataclass(frozen=True)
class NetworkState:
    """Snapshot of every pipeline grid plus node pressures and injections."""

    grids: dict
    node_pressure: np.ndarray
    injection: np.ndarray


@dataclass
class Trajectory:
    """Recorded simulation; index 0 holds the initial state."""

    dt: float
    times: np.ndarray
    pipe_pressure: dict
    pipe_mfr: dict
    node_pressure: np.ndarray
    injection: np.ndarray
    withdrawal: np.ndarray
    residual: np.ndarray
    node_ids: tuple
    params: dict

    @property
    def steps(self) -> int:
        return self.times.size - 1

    def grid(self, pipe_id: str, step: int) -> GridState:
        p = self.pipe_pressure[pipe_id][step]
        return GridState(p, self.pipe_mfr[pipe_id][step], self.params[pipe_id].length / (p.size - 1))

    def state(self, step: int) -> NetworkState:
        return NetworkState(
            {pid: self.grid(pid, step) for pid in self.pipe_pressure},
            self.node_pressure[step].copy(),
            self.injection[step].copy(),
        )

    def inlet_mfr(self, pipe_id):
        return self.pipe_mfr[pipe_id][:, 0]

    def outlet_mfr(self, pipe_id):
        return self.pipe_mfr[pipe_id][:, -1]

    def inlet_pressure(self, pipe_id):
        return self.pipe_pressure[pipe_id][:, 0]

    def outlet_pressure(self, pipe_id):
        return self.pipe_pressure[pipe_id][:, -1]

    def linepack(self) -> np.ndarray:
        """Total stored mass (kg) at every recorded step."""
        total = np.zeros(self.times.size)
        for pid, p in self.pipe_pressure.items():
            prm = self.params[pid]
            dx = prm.length / (p.shape[1] - 1)
            total += p[:, 1:].sum(axis=1) * prm.area * dx / prm.sound_speed**2
        return total

    def to_csv(self, directory) -> list[Path]:
        """Write one CSV per pipeline plus a node table; returns the paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for pid in self.pipe_pressure:
            path = directory / f"trajectory_{pid}.csv"
            p, m = self.pipe_pressure[pid], self.pipe_mfr[pid]
            K = p.shape[1] - 1
            header = ["t"] + [f"p{i}" for i in range(K + 1)] + [f"m{i}" for i in range(K + 1)]
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for n in range(self.times.size):
                    w.writerow([repr(float(self.times[n]))] + [repr(float(v)) for v in p[n]]
                               + [repr(float(v)) for v in m[n]])
            paths.append(path)
        path = directory / "trajectory_nodes.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"P_{n}" for n in self.node_ids] + [f"inj_{n}" for n in self.node_ids]
                       + [f"w_{n}" for n in self.node_ids])
            for n in range(self.times.size):
                w.writerow([repr(float(self.times[n]))]
                           + [repr(float(v)) for v in self.node_pressure[n]]
                           + [repr(float(v)) for v in self.injection[n]]
                           + [repr(float(v)) for v in self.withdrawal[n]])
        paths.append(path)
        return paths


class _NetworkSystem:
    """Index bookkeeping, residual and Jacobian of one backward-Euler step."""

    def __init__(self, net: GasNetworkSpec, K: dict | None, mode: str, vbar: float | None):
        if mode not in (NONLINEAR, LOCAL):
            raise DomainError(f"unknown mode {mode!r}")
        if mode == LOCAL and vbar is None:
            raise DomainError("local mode needs vbar")
        self.net = net
        self.mode = mode
        self.vbar = vbar
        self.K = {p.id: int((K or {}).get(p.id, p.K)) for p in net.pipelines}
        nn = len(net.nodes)
        self.is_source = np.array([n.role == SOURCE for n in net.nodes])
        self.source_idx = np.flatnonzero(self.is_source)
        self.load_idx = np.array([i for i, n in enumerate(net.nodes) if n.role == "load"], dtype=int)

        col = 0
        self.pipes = []
        for p in net.pipelines:
            K_p = self.K[p.id]
            if K_p < 1:
                raise DomainError(f"pipeline {p.id}: K must be >= 1")
            pint = np.arange(col, col + K_p - 1)
            col += K_p - 1
            mcol = np.arange(col, col + K_p + 1)
            col += K_p + 1
            self.pipes.append(
                dict(id=p.id, prm=p.params, K=K_p, pint=pint, mcol=mcol,
                     a=net.node_index(p.from_node), b=net.node_index(p.to_node))
            )
        self.node_col = np.arange(col, col + nn)
        col += nn
        self.n = col
        for info in self.pipes:
            pcol = np.full(info["K"] + 1, -1)
            pcol[1:-1] = info["pint"]
            pcol[0] = -1 if self.is_source[info["a"]] else self.node_col[info["a"]]
            pcol[-1] = -1 if self.is_source[info["b"]] else self.node_col[info["b"]]
            info["pcol"] = pcol

    # -- packing -----------------------------------------------------------
    def unpack(self, z, src_p):
        node_p = np.empty(len(self.net.nodes))
        inj = np.zeros(len(self.net.nodes))
        zn = z[self.node_col]
        node_p[~self.is_source] = zn[~self.is_source] * P_BASE
        node_p[self.is_source] = src_p
        inj[self.is_source] = zn[self.is_source] * M_BASE
        grids_p, grids_m = {}, {}
        for info in self.pipes:
            p = np.empty(info["K"] + 1)
            p[0] = node_p[info["a"]]
            p[-1] = node_p[info["b"]]
            p[1:-1] = z[info["pint"]] * P_BASE
            grids_p[info["id"]] = p
            grids_m[info["id"]] = z[info["mcol"]] * M_BASE
        return grids_p, grids_m, node_p, inj

    def pack(self, grids_p, grids_m, node_p, inj):
        z = np.zeros(self.n)
        for info in self.pipes:
            z[info["pint"]] = grids_p[info["id"]][1:-1] / P_BASE
            z[info["mcol"]] = grids_m[info["id"]] / M_BASE
        zn = np.where(self.is_source, inj / M_BASE, node_p / P_BASE)
        z[self.node_col] = zn
        return z

    # -- residual ----------------------------------------------------------
    def evaluate(self, z, old_p, old_m, dt, src_p, withdrawal, steady=False, want_jac=True,
                 mode=None, vbar=None):
        mode = mode or self.mode
        vbar = self.vbar if vbar is None else vbar
        grids_p, grids_m, node_p, inj = self.unpack(z, src_p)
        res = np.empty(self.n)
        rows, cols, vals = [], [], []
        r = 0
        for info in self.pipes:
            prm: PipelineParams = info["prm"]
            K = info["K"]
            p = grids_p[info["id"]]
            m = grids_m[info["id"]]
            if np.any(p <= 0):
                raise NonPhysicalState(f"nonpositive pressure in pipeline {info['id']}")
            dx = prm.length / K
            A = prm.area
            s = 0.0 if steady else A * dx / (prm.sound_speed**2 * dt)
            q = 0.0 if steady else dx / (A * dt)
            pa = 0.5 * (p[1:] + p[:-1])
            ma = 0.5 * (m[1:] + m[:-1])
            F, Fp, Fm = friction_derivatives(prm, pa, ma, mode, vbar)
            mass = m[1:] - m[:-1]
            mom = p[1:] - p[:-1] + dx * F
            if not steady:
                mass = mass + s * (p[1:] - old_p[info["id"]][1:])
                mom = mom + q * (m[1:] - old_m[info["id"]][1:])
            res[r:r + K] = mass / M_BASE
            res[r + K:r + 2 * K] = mom / P_BASE
            if want_jac:
                k = np.arange(K)
                pcol = info["pcol"]
                mcol = info["mcol"]
                # mass rows
                rr = r + k
                _add(rows, cols, vals, rr, pcol[1:], np.full(K, s * P_BASE / M_BASE))
                _add(rows, cols, vals, rr, mcol[1:], np.ones(K))
                _add(rows, cols, vals, rr, mcol[:-1], -np.ones(K))
                # momentum rows
                rr = r + K + k
                _add(rows, cols, vals, rr, pcol[1:], 1.0 + 0.5 * dx * Fp)
                _add(rows, cols, vals, rr, pcol[:-1], -1.0 + 0.5 * dx * Fp)
                _add(rows, cols, vals, rr, mcol[1:], (q + 0.5 * dx * Fm) * M_BASE / P_BASE)
                _add(rows, cols, vals, rr, mcol[:-1], 0.5 * dx * Fm * M_BASE / P_BASE)
            r += 2 * K
        # node balance
        bal = inj - withdrawal
        for info in self.pipes:
            bal[info["b"]] += grids_m[info["id"]][-1]
            bal[info["a"]] -= grids_m[info["id"]][0]
        res[r:] = bal / M_BASE
        if not want_jac:
            return res, None
        for info in self.pipes:
            rows += [r + info["b"], r + info["a"]]
            cols += [info["mcol"][-1], info["mcol"][0]]
            vals += [1.0, -1.0]
        for i in self.source_idx:
            rows.append(r + i)
            cols.append(self.node_col[i])
            vals.append(1.0)
        J = sp.csc_matrix(
            (np.concatenate([np.atleast_1d(v) for v in vals]).astype(float),
             (np.concatenate([np.atleast_1d(v) for v in rows]).astype(int),
              np.concatenate([np.atleast_1d(v) for v in cols]).astype(int))),
            shape=(self.n, self.n),
        )
        return res, J

    def newton(self, z0, old_p, old_m, dt, src_p, withdrawal, steady=False, tol=NEWTON_TOL,
               max_iter=NEWTON_MAX_ITER, mode=None, vbar=None, step=None):
        z = z0.copy()
        res, J = self.evaluate(z, old_p, old_m, dt, src_p, withdrawal, steady, mode=mode, vbar=vbar)
        norm = np.max(np.abs(res))
        for _ in range(max_iter):
            if norm <= tol:
                return z, norm
            dz = spsolve(J, -res)
            if not np.all(np.isfinite(dz)):
                raise NewtonDivergence("singular Newton system", norm, step)
            alpha = 1.0
            best = None
            for _ in range(MAX_HALVINGS + 1):
                trial = z + alpha * dz
                try:
                    r_t, J_t = self.evaluate(trial, old_p, old_m, dt, src_p, withdrawal, steady,
                                             mode=mode, vbar=vbar)
                except NonPhysicalState:
                    alpha *= 0.5
                    continue
                n_t = np.max(np.abs(r_t))
                if best is None or n_t < best[0]:
                    best = (n_t, trial, r_t, J_t)
                if n_t < norm:
                    break
                alpha *= 0.5
            if best is None:
                raise NonPhysicalState(f"pressure nonpositive after damping (step {step})")
            norm, z, res, J = best
        if norm <= tol:
            return z, norm
        raise NewtonDivergence(
            f"Newton did not converge in {max_iter} iterations (residual {norm:.3e})", norm, step
        )


def _add(rows, cols, vals, r, c, v):
    c = np.asarray(c)
    keep = c >= 0
    rows.append(np.asarray(r)[keep])
    cols.append(c[keep])
    vals.append(np.broadcast_to(np.asarray(v, dtype=float), c.shape)[keep])


def _withdrawal_vector(system: _NetworkSystem, load_values) -> np.ndarray:
    w = np.zeros(len(system.net.nodes))
    w[system.load_idx] = load_values
    return w


def _check_mode_args(mode, vbar):
    if mode == LOCAL and vbar is None:
        raise DomainError("local mode needs vbar")


def network_steady_state(
    net: GasNetworkSpec,
    source_pressures,
    withdrawals,
    K: dict | None = None,
    mode: str = NONLINEAR,
    vbar: float | None = None,
) -> NetworkState:
    """Solve the steady network flow for given source pressures and load withdrawals.

    ``source_pressures`` is ordered like ``net.sources`` and ``withdrawals``
    like ``net.loads``.
    """
    _check_mode_args(mode, vbar)
    system = _NetworkSystem(net, K, mode, vbar)
    src_p = np.atleast_1d(np.asarray(source_pressures, dtype=float))
    w = _withdrawal_vector(system, np.atleast_1d(np.asarray(withdrawals, dtype=float)))
    # Linear friction first: gives a nonsingular starting point for the nonlinear solve.
    z = np.zeros(system.n)
    z[system.node_col] = np.where(system.is_source, 0.0, np.mean(src_p) / P_BASE)
    for info in system.pipes:
        z[info["pint"]] = np.mean(src_p) / P_BASE
    guess_vbar = vbar if mode == LOCAL else 1.0
    z, _ = system.newton(z, None, None, None, src_p, w, steady=True, mode=LOCAL, vbar=guess_vbar)
    if mode == NONLINEAR:
        z, _ = system.newton(z, None, None, None, src_p, w, steady=True)
    grids_p, grids_m, node_p, inj = system.unpack(z, src_p)
    grids = {
        info["id"]: GridState(grids_p[info["id"]], grids_m[info["id"]], info["prm"].length / info["K"])
        for info in system.pipes
    }
    return NetworkState(grids, node_p, inj)


def simulate_network(
    net: GasNetworkSpec,
    dt: float,
    boundary: BoundaryProfile,
    init: NetworkState | dict,
    K: dict | None = None,
    mode: str = NONLINEAR,
    vbar: float | None = None,
    tol: float = NEWTON_TOL,
) -> Trajectory:
    """Backward-Euler simulation of a whole network.

    Source nodes follow ``boundary.inlet_pressure`` (columns ordered like
    ``net.sources``); load nodes withdraw ``boundary.outlet_mfr`` (ordered
    like ``net.loads``).
    """
    _check_mode_args(mode, vbar)
    if dt <= 0:
        raise DomainError("dt must be positive")
    system = _NetworkSystem(net, K, mode, vbar)
    if boundary.inlet_pressure.shape[1] != len(net.sources):
        raise DomainError("boundary pressure columns must match the source nodes")
    if boundary.outlet_mfr.shape[1] != len(net.loads):
        raise DomainError("boundary withdrawal columns must match the load nodes")
    grids = init.grids if isinstance(init, NetworkState) else dict(init)
    for info in system.pipes:
        g = grids.get(info["id"])
        if g is None:
            raise TopologyError(f"initial state missing pipeline {info['id']}")
        if g.segments != info["K"]:
            raise DomainError(f"initial grid of {info['id']} has {g.segments} segments, expected {info['K']}")
    node_p, inj = _node_values_from_grids(system, grids)

    steps = len(boundary)
    nn = len(net.nodes)
    P = {i["id"]: np.empty((steps + 1, i["K"] + 1)) for i in system.pipes}
    M = {i["id"]: np.empty((steps + 1, i["K"] + 1)) for i in system.pipes}
    node_hist = np.empty((steps + 1, nn))
    inj_hist = np.empty((steps + 1, nn))
    w_hist = np.zeros((steps + 1, nn))
    res_hist = np.zeros(steps + 1)
    for info in system.pipes:
        P[info["id"]][0] = grids[info["id"]].pressures
        M[info["id"]][0] = grids[info["id"]].mfrs
    node_hist[0] = node_p
    inj_hist[0] = inj
    w_hist[0] = _withdrawal_vector(system, _initial_withdrawal(system, grids))

    old_p = {k: v[0].copy() for k, v in P.items()}
    old_m = {k: v[0].copy() for k, v in M.items()}
    z = system.pack(old_p, old_m, node_p, inj)
    for n in range(steps):
        src_p = boundary.inlet_pressure[n]
        w = _withdrawal_vector(system, boundary.outlet_mfr[n])
        # warm start; keep the prescribed source pressures out of the unknowns
        z, norm = system.newton(z, old_p, old_m, dt, src_p, w, tol=tol, step=n + 1)
        gp, gm, node_p, inj = system.unpack(z, src_p)
        for pid in P:
            P[pid][n + 1] = gp[pid]
            M[pid][n + 1] = gm[pid]
        node_hist[n + 1] = node_p
        inj_hist[n + 1] = inj
        w_hist[n + 1] = w
        res_hist[n + 1] = norm
        old_p, old_m = gp, gm
    times = np.concatenate([[boundary.times[0] - dt], boundary.times])
    return Trajectory(
        dt=float(dt),
        times=times,
        pipe_pressure=P,
        pipe_mfr=M,
        node_pressure=node_hist,
        injection=inj_hist,
        withdrawal=w_hist,
        residual=res_hist,
        node_ids=tuple(n.id for n in net.nodes),
        params={p.id: p.params for p in net.pipelines},
    )


def _node_values_from_grids(system, grids, tol=1e-6):
    nn = len(system.net.nodes)
    node_p = np.full(nn, np.nan)
    inj = np.zeros(nn)
    for info in system.pipes:
        g = grids[info["id"]]
        for node, val in ((info["a"], g.pressures[0]), (info["b"], g.pressures[-1])):
            if np.isnan(node_p[node]):
                node_p[node] = val
            elif abs(node_p[node] - val) > tol * P_BASE:
                raise TopologyError(
                    f"initial pressures disagree at node {system.net.nodes[node].id}"
                )
        inj[info["a"]] += g.mfrs[0]
        inj[info["b"]] -= g.mfrs[-1]
    # inj now holds net outflow; sources inject exactly this amount
    injection = np.where(system.is_source, inj, 0.0)
    return node_p, injection


def _initial_withdrawal(system, grids):
    out = np.zeros(len(system.net.nodes))
    for info in system.pipes:
        g = grids[info["id"]]
        out[info["b"]] += g.mfrs[-1]
        out[info["a"]] -= g.mfrs[0]
    return out[system.load_idx]


def residual_norm(net, dt, prev: NetworkState, cur: NetworkState, src_p, withdrawals,
                  K=None, mode=NONLINEAR, vbar=None) -> float:
    """Normalized backward-Euler residual of a recorded step (max-abs)."""
    system = _NetworkSystem(net, K, mode, vbar)
    z = system.pack(
        {k: g.pressures for k, g in cur.grids.items()},
        {k: g.mfrs for k, g in cur.grids.items()},
        cur.node_pressure,
        cur.injection,
    )
    res, _ = system.evaluate(
        z,
        {k: g.pressures for k, g in prev.grids.items()},
        {k: g.mfrs for k, g in prev.grids.items()},
        dt,
        np.atleast_1d(src_p),
        _withdrawal_vector(system, np.atleast_1d(withdrawals)),
        want_jac=False,
    )
    return float(np.max(np.abs(res)))


def simulate_pipeline(
    params: PipelineParams,
    K: int,
    dt: float,
    boundary: BoundaryProfile,
    init: GridState,
    mode: str = NONLINEAR,
    vbar: float | None = None,
    tol: float = NEWTON_TOL,
) -> Trajectory:
    """Simulate one pipeline with prescribed inlet pressure and outlet flow."""
    if init.segments != K:
        raise DomainError(f"initial grid has {init.segments} segments, expected {K}")
    net = single_pipeline_network(params, K)
    return simulate_network(net, dt, boundary, {params.name: init}, {params.name: K}, mode, vbar, tol)
