"""Joint electricity-gas dispatch as one linear program.

The electric side is a DC power flow with generator, line and angle limits.
The gas side uses either the per-pipeline lifted linear models (``global``)
or a backward-Euler finite-difference discretization with average-velocity
friction (``local``). Both sides meet through gas-fired units, which withdraw
gas, and power-to-gas units, which inject it.

All gas quantities inside the LP are normalized by ``P_BASE`` and ``M_BASE``;
hourly controls are held constant over the gas steps they contain.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, SchemaMismatch, SpecError
from .gas_dynamics import LOCAL, NONLINEAR
from .koopman_id import KoopmanModel, get_observables, lift
from .lp import LinearProgram, LPBuilder, LPResult, solve_lp
from .network import SOURCE, GasNetworkSpec
from .transient_sim import M_BASE, P_BASE, NetworkState, network_steady_state

GLOBAL = "global"
GAS_MODELS = (GLOBAL, LOCAL)
GEN_TYPES = ("coal", "gas-fired", "wind")
SOLUTION_VERSION = 1


# ---------------------------------------------------------------------------
# specifications


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    reactance: float
    limit: float = math.inf


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    type: str
    p_min: float
    p_max: float
    cost: float
    ramp: float = math.inf
    availability: tuple | None = None

    def __post_init__(self):
        if self.type not in GEN_TYPES:
            raise SpecError(f"generator {self.id}: type must be one of {GEN_TYPES}")
        if not self.p_min <= self.p_max:
            raise SpecError(f"generator {self.id}: p_min > p_max")
        if self.type == "wind" and self.availability is None:
            raise SpecError(f"wind generator {self.id} needs an availability profile")


@dataclass(frozen=True)
class PowerSystemSpec:
    """Buses, lines, generators and hourly bus loads (MW)."""

    buses: tuple
    lines: tuple
    generators: tuple
    loads: dict
    slack: str
    base_mva: float = 100.0
    angle_limit: float = math.pi

    def __post_init__(self):
        buses = tuple(self.buses)
        object.__setattr__(self, "buses", buses)
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "generators", tuple(self.generators))
        if len(set(buses)) != len(buses):
            raise SpecError("power.buses: duplicate bus ids")
        if self.slack not in buses:
            raise SpecError(f"power.slack: unknown bus {self.slack!r}")
        for ln in self.lines:
            if ln.from_bus not in buses or ln.to_bus not in buses:
                raise SpecError(f"power.lines.{ln.id}: unknown bus")
            if ln.reactance <= 0:
                raise SpecError(f"power.lines.{ln.id}: reactance must be positive")
        for g in self.generators:
            if g.bus not in buses:
                raise SpecError(f"power.generators.{g.id}: unknown bus {g.bus!r}")
        for b in self.loads:
            if b not in buses:
                raise SpecError(f"power.loads: unknown bus {b!r}")
        # connectivity
        adj = {b: set() for b in buses}
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        seen, stack = {buses[0]}, [buses[0]]
        while stack:
            for nxt in adj[stack.pop()] - seen:
                seen.add(nxt)
                stack.append(nxt)
        if len(seen) != len(buses):
            raise SpecError("power: bus graph is disconnected")

    def generator(self, gid: str) -> Generator:
        for g in self.generators:
            if g.id == gid:
                return g
        raise SpecError(f"unknown generator {gid!r}")

    def load(self, bus: str, hour: int) -> float:
        prof = self.loads.get(bus)
        return 0.0 if prof is None else float(prof[hour])


@dataclass(frozen=True)
class GasFiredLink:
    generator: str
    gas_node: str
    coefficient: float  # kg/s per MW


@dataclass(frozen=True)
class P2GLink:
    id: str
    bus: str
    gas_node: str
    coefficient: float  # kg/s per MW
    p_min: float = 0.0
    p_max: float = 0.0


@dataclass(frozen=True)
class CouplingSpec:
    gas_fired: tuple = ()
    p2g: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "gas_fired", tuple(self.gas_fired))
        object.__setattr__(self, "p2g", tuple(self.p2g))
        for link in self.gas_fired + self.p2g:
            if link.coefficient <= 0:
                raise SpecError("coupling coefficients must be positive")
        for link in self.p2g:
            if not 0 <= link.p_min <= link.p_max:
                raise SpecError(f"coupling.p2g.{link.id}: need 0 <= p_min <= p_max")


@dataclass(frozen=True)
class SourceSpec:
    price: float  # $/kg
    p_min: float
    p_max: float
    p_init: float


@dataclass(frozen=True)
class DispatchHorizon:
    hours: int = 24
    control_interval: float = 3600.0
    dt: float = 900.0

    def __post_init__(self):
        if self.hours < 1:
            raise SpecError("horizon.hours must be >= 1")
        ratio = self.control_interval / self.dt
        if self.dt <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise SpecError("horizon: control interval must be a multiple of dt")

    @property
    def steps_per_interval(self) -> int:
        return int(round(self.control_interval / self.dt))

    @property
    def steps(self) -> int:
        return self.hours * self.steps_per_interval


@dataclass(frozen=True)
class GasDispatchSpec:
    """Gas network, per-pipeline models, sources, baseline loads and the initial state.

    ``load_profiles`` maps load nodes to hourly baseline withdrawals in kg/s;
    ``initial_withdrawal`` (kg/s per load node) fixes the steady state the
    system starts from and defaults to the first hour of the baseline.
    """

    network: GasNetworkSpec
    sources: dict
    load_profiles: dict
    models: dict = field(default_factory=dict)
    initial_withdrawal: dict | None = None
    initial_state: NetworkState | None = None

    def __post_init__(self):
        net = self.network
        for nid in net.sources:
            if nid not in self.sources:
                raise SpecError(f"gas.sources: missing source node {nid!r}")
        for nid, src in self.sources.items():
            if nid not in net.sources:
                raise SpecError(f"gas.sources.{nid}: not a source node")
            if not 0 < src.p_min <= src.p_init <= src.p_max:
                raise SpecError(f"gas.sources.{nid}: need 0 < p_min <= p_init <= p_max")
        for nid in self.load_profiles:
            if nid not in net.loads:
                raise SpecError(f"gas.loads.{nid}: not a load node")
        if self.initial_state is None:
            object.__setattr__(self, "initial_state", self._steady())

    def _steady(self) -> NetworkState:
        w0 = self.initial_withdrawal or {}
        withdrawals = [
            float(w0.get(n, self.load_profiles[n][0] if n in self.load_profiles else 0.0))
            for n in self.network.loads
        ]
        src_p = [self.sources[n].p_init for n in self.network.sources]
        return network_steady_state(self.network, src_p, withdrawals, mode=NONLINEAR)

    def baseline(self, node: str, hour: int) -> float:
        prof = self.load_profiles.get(node)
        return 0.0 if prof is None else float(prof[hour])

    def with_models(self, models: dict) -> "GasDispatchSpec":
        return GasDispatchSpec(self.network, self.sources, self.load_profiles, dict(models),
                               self.initial_withdrawal, self.initial_state)


# ---------------------------------------------------------------------------
# validation


def _validate(power, coupling, gas, horizon, gas_model, vbar):
    if gas_model not in GAS_MODELS:
        raise SpecError(f"gas model must be one of {GAS_MODELS}, got {gas_model!r}")
    if gas_model == LOCAL and (vbar is None or vbar < 0):
        raise SpecError("local gas model needs vbar >= 0")
    T = horizon.hours
    for bus, prof in power.loads.items():
        if len(prof) < T:
            raise SpecError(f"power.loads.{bus}: profile shorter than {T} hours")
    for g in power.generators:
        if g.availability is not None and len(g.availability) < T:
            raise SpecError(f"power.generators.{g.id}: availability shorter than {T} hours")
    for nid, prof in gas.load_profiles.items():
        if len(prof) < T:
            raise SpecError(f"gas.loads.{nid}: profile shorter than {T} hours")
    net = gas.network
    for link in coupling.gas_fired:
        g = power.generator(link.generator)
        if g.type != "gas-fired":
            raise SpecError(f"coupling.gas_fired: generator {g.id} is not gas-fired")
        if link.gas_node not in net.loads:
            raise SpecError(f"coupling.gas_fired.{g.id}: gas node must be a load node")
    for link in coupling.p2g:
        if link.bus not in power.buses:
            raise SpecError(f"coupling.p2g.{link.id}: unknown bus {link.bus!r}")
        if link.gas_node not in net.loads:
            raise SpecError(f"coupling.p2g.{link.id}: gas node must be a load node")
    if gas_model == GLOBAL:
        for pipe in net.pipelines:
            model = gas.models.get(pipe.id)
            if model is None:
                raise SpecError(f"gas.models: no model for pipeline {pipe.id}")
            if get_observables(model.observables).N != model.N:
                raise DimensionMismatch(f"model of {pipe.id}: N disagrees with its observable set")
            if abs(model.dt - horizon.dt) > 1e-9:
                raise SpecError(f"model of {pipe.id}: dt {model.dt} s differs from horizon dt {horizon.dt} s")
            stab = model.stability or {}
            rho = stab.get("certified_spectral_radius")
            if not stab.get("enabled") or rho is None or not rho < 1:
                raise SpecError(f"model of {pipe.id}: not certified stable")


# ---------------------------------------------------------------------------
# assembly


def _node_pressure_col(blocks, net, node, t, spi):
    """Column (and scale 1) holding the normalized pressure of ``node`` at step ``t`` (1-based)."""
    if net.node(node).role == SOURCE:
        return blocks["src_p"][(t - 1) // spi, net.sources.index(node)]
    return blocks["node_p"][t - 1, _nonsource(net).index(node)]


def _nonsource(net):
    return [n.id for n in net.nodes if n.role != SOURCE]


def assemble_lp(
    power: PowerSystemSpec,
    coupling: CouplingSpec,
    gas: GasDispatchSpec,
    horizon: DispatchHorizon = DispatchHorizon(),
    gas_model: str = GLOBAL,
    vbar: float | None = None,
) -> LinearProgram:
    """Build the dispatch LP.

    Raises
    ------
    SpecError
        On inconsistent specifications.
    DimensionMismatch
        If a model's lifted dimension disagrees with its observable set.
    """
    _validate(power, coupling, gas, horizon, gas_model, vbar)
    T, S, spi, dt = horizon.hours, horizon.steps, horizon.steps_per_interval, horizon.dt
    net = gas.network
    b = LPBuilder()

    # -- electric side ----------------------------------------------------
    gens = power.generators
    lb = np.empty((T, len(gens)))
    ub = np.empty((T, len(gens)))
    for j, g in enumerate(gens):
        if g.type == "wind":
            avail = np.asarray(g.availability[:T], dtype=float)
            ub[:, j] = avail
            lb[:, j] = np.minimum(g.p_min, avail)
        else:
            lb[:, j], ub[:, j] = g.p_min, g.p_max
    cost = np.array([g.cost for g in gens]) * horizon.control_interval / 3600.0
    gen = b.var("gen", (T, len(gens)), lb, ub, np.broadcast_to(cost, (T, len(gens))))
    p2g = b.var("p2g", (T, len(coupling.p2g)),
                [l.p_min for l in coupling.p2g] or 0.0, [l.p_max for l in coupling.p2g] or 0.0)
    ang_lb = np.full((T, len(power.buses)), -power.angle_limit)
    ang_ub = np.full((T, len(power.buses)), power.angle_limit)
    k_slack = power.buses.index(power.slack)
    ang_lb[:, k_slack] = ang_ub[:, k_slack] = 0.0
    theta = b.var("theta", (T, len(power.buses)), ang_lb, ang_ub)

    bus_idx = {bus: i for i, bus in enumerate(power.buses)}
    for h in range(T):
        for bus in power.buses:
            cols, vals = [], []
            for j, g in enumerate(gens):
                if g.bus == bus:
                    cols.append(gen[h, j])
                    vals.append(1.0)
            for j, link in enumerate(coupling.p2g):
                if link.bus == bus:
                    cols.append(p2g[h, j])
                    vals.append(-1.0)
            for ln in power.lines:
                y = power.base_mva / ln.reactance
                if ln.from_bus == bus:
                    cols += [theta[h, bus_idx[ln.from_bus]], theta[h, bus_idx[ln.to_bus]]]
                    vals += [-y, y]
                elif ln.to_bus == bus:
                    cols += [theta[h, bus_idx[ln.from_bus]], theta[h, bus_idx[ln.to_bus]]]
                    vals += [y, -y]
            b.eq(cols, vals, power.load(bus, h), f"power balance bus {bus} hour {h}")
        for ln in power.lines:
            if math.isfinite(ln.limit):
                y = power.base_mva / ln.reactance
                cols = [theta[h, bus_idx[ln.from_bus]], theta[h, bus_idx[ln.to_bus]]]
                b.le(cols, [y, -y], ln.limit, f"line {ln.id} forward limit hour {h}")
                b.le(cols, [-y, y], ln.limit, f"line {ln.id} reverse limit hour {h}")
        if h:
            for j, g in enumerate(gens):
                if math.isfinite(g.ramp):
                    b.le([gen[h, j], gen[h - 1, j]], [1, -1], g.ramp, f"ramp up {g.id} hour {h}")
                    b.le([gen[h, j], gen[h - 1, j]], [-1, 1], g.ramp, f"ramp down {g.id} hour {h}")

    # -- gas controls -----------------------------------------------------
    srcs = net.sources
    loads = net.loads
    others = _nonsource(net)
    s_lb = np.array([max(gas.sources[n].p_min, net.node(n).p_min) for n in srcs]) / P_BASE
    s_ub = np.array([min(gas.sources[n].p_max, net.node(n).p_max) for n in srcs]) / P_BASE
    b.var("src_p", (T, len(srcs)), np.broadcast_to(s_lb, (T, len(srcs))),
          np.broadcast_to(s_ub, (T, len(srcs))))
    wdr = b.var("withdrawal", (T, len(loads)))
    n_lb = np.array([net.node(n).p_min for n in others]) / P_BASE
    n_ub = np.array([net.node(n).p_max for n in others]) / P_BASE
    b.var("node_p", (S, len(others)), np.broadcast_to(n_lb, (S, len(others))),
          np.broadcast_to(n_ub, (S, len(others))))
    price = np.array([gas.sources[n].price for n in srcs]) * M_BASE * dt
    inj = b.var("injection", (S, len(srcs)), 0.0, np.inf, np.broadcast_to(price, (S, len(srcs))))
    blocks = b.blocks

    for h in range(T):
        for l, node in enumerate(loads):
            cols, vals = [wdr[h, l]], [M_BASE]
            for link in coupling.gas_fired:
                if link.gas_node == node:
                    cols.append(gen[h, [g.id for g in gens].index(link.generator)])
                    vals.append(-link.coefficient)
            for j, link in enumerate(coupling.p2g):
                if link.gas_node == node:
                    cols.append(p2g[h, j])
                    vals.append(link.coefficient)
            b.eq(cols, vals, gas.baseline(node, h), f"withdrawal {node} hour {h}")

    # -- pipelines --------------------------------------------------------
    ends = {}  # pipe id -> (p_in, m_in, p_out, m_out) column arrays over steps, normalized
    init = gas.initial_state
    for pipe in net.pipelines:
        prm = pipe.params
        g0 = init.grids[pipe.id]
        if gas_model == GLOBAL:
            model: KoopmanModel = gas.models[pipe.id]
            N = model.N
            sp_ = P_BASE / model.p_base  # LP units -> model units
            sm_ = M_BASE / model.m_base
            psi_lb = np.full(N, -np.inf)
            psi_ub = np.full(N, np.inf)
            psi_lb[:2] = [prm.p_min / model.p_base, prm.mfr_min / model.m_base]
            psi_ub[:2] = [prm.p_max / model.p_base, prm.mfr_max / model.m_base]
            psi = b.var(f"psi:{pipe.id}", (S, N), np.broadcast_to(psi_lb, (S, N)),
                        np.broadcast_to(psi_ub, (S, N)))
            u = b.var(f"u:{pipe.id}", (S, 2), np.broadcast_to(psi_lb[:2], (S, 2)),
                      np.broadcast_to(psi_ub[:2], (S, 2)))
            x0 = np.array([g0.pressures[-1] / model.p_base, g0.mfrs[-1] / model.m_base])
            u0 = np.array([g0.pressures[0] / model.p_base, g0.mfrs[0] / model.m_base])
            psi0 = lift(model.obs, x0)
            for t in range(1, S + 1):
                const = np.zeros(N)
                cols = [[psi[t - 1, r]] for r in range(N)]
                vals = [[1.0] for _ in range(N)]
                for i, Kx in enumerate(model.Kx, start=1):
                    if t - i >= 1:
                        for r in range(N):
                            cols[r] += list(psi[t - i - 1])
                            vals[r] += list(-Kx[r])
                    else:
                        const += Kx @ psi0
                for i, Ku in enumerate(model.Ku):
                    if t - i >= 1:
                        for r in range(N):
                            cols[r] += list(u[t - i - 1])
                            vals[r] += list(-Ku[r])
                    else:
                        const += Ku @ u0
                for r in range(N):
                    b.eq(cols[r], vals[r], const[r], f"lifted dynamics {pipe.id} step {t} row {r}")
            scale_p, scale_m = 1.0 / sp_, 1.0 / sm_
            ends[pipe.id] = (u[:, 0], u[:, 1], psi[:, 0], psi[:, 1], scale_p, scale_m)
        else:
            K = pipe.K
            if g0.segments != K:
                raise SpecError(f"initial grid of {pipe.id} has {g0.segments} segments, expected {K}")
            pl = np.full(K + 1, prm.p_min / P_BASE)
            pu = np.full(K + 1, prm.p_max / P_BASE)
            ml = np.full(K + 1, prm.mfr_min / M_BASE)
            mu = np.full(K + 1, prm.mfr_max / M_BASE)
            pv = b.var(f"p:{pipe.id}", (S, K + 1), np.broadcast_to(pl, (S, K + 1)),
                       np.broadcast_to(pu, (S, K + 1)))
            mv = b.var(f"m:{pipe.id}", (S, K + 1), np.broadcast_to(ml, (S, K + 1)),
                       np.broadcast_to(mu, (S, K + 1)))
            dx = prm.length / K
            A = prm.area
            s = A * dx / (prm.sound_speed**2 * dt)
            q = dx / (A * dt)
            cf = prm.friction_factor * vbar / (2.0 * prm.diameter * A)
            p_old0 = g0.pressures / P_BASE
            m_old0 = g0.mfrs / M_BASE
            for t in range(1, S + 1):
                for k in range(1, K + 1):
                    # mass: s (p_k - p_k_old) + m_k - m_{k-1} = 0   [/ M_BASE]
                    a_p = s * P_BASE / M_BASE
                    cols = [pv[t - 1, k], mv[t - 1, k], mv[t - 1, k - 1]]
                    vals = [a_p, 1.0, -1.0]
                    rhs = 0.0
                    if t > 1:
                        cols.append(pv[t - 2, k])
                        vals.append(-a_p)
                    else:
                        rhs = a_p * p_old0[k]
                    b.eq(cols, vals, rhs, f"fd mass {pipe.id} step {t} cell {k}")
                    # momentum: q (m_k - m_k_old) + p_k - p_{k-1} + dx cf (m_k + m_{k-1}) / 2 = 0
                    a_m = q * M_BASE / P_BASE
                    a_f = 0.5 * dx * cf * M_BASE / P_BASE
                    cols = [mv[t - 1, k], pv[t - 1, k], pv[t - 1, k - 1], mv[t - 1, k - 1]]
                    vals = [a_m + a_f, 1.0, -1.0, a_f]
                    rhs = 0.0
                    if t > 1:
                        cols.append(mv[t - 2, k])
                        vals.append(-a_m)
                    else:
                        rhs = a_m * m_old0[k]
                    b.eq(cols, vals, rhs, f"fd momentum {pipe.id} step {t} cell {k}")
            ends[pipe.id] = (pv[:, 0], mv[:, 0], pv[:, K], mv[:, K], 1.0, 1.0)

    # -- node coupling ----------------------------------------------------
    for pipe in net.pipelines:
        p_in, m_in, p_out, m_out, sc_p, _ = ends[pipe.id]
        for t in range(1, S + 1):
            b.eq([p_in[t - 1], _node_pressure_col(blocks, net, pipe.from_node, t, spi)], [sc_p, -1.0],
                 0.0, f"pressure continuity {pipe.id} inlet step {t}")
            b.eq([p_out[t - 1], _node_pressure_col(blocks, net, pipe.to_node, t, spi)], [sc_p, -1.0],
                 0.0, f"pressure continuity {pipe.id} outlet step {t}")
    for t in range(1, S + 1):
        h = (t - 1) // spi
        for node in net.nodes:
            cols, vals = [], []
            for pipe in net.pipelines:
                _, m_in, _, m_out, _, sc_m = ends[pipe.id]
                if pipe.to_node == node.id:
                    cols.append(m_out[t - 1])
                    vals.append(sc_m)
                if pipe.from_node == node.id:
                    cols.append(m_in[t - 1])
                    vals.append(-sc_m)
            if node.role == SOURCE:
                cols.append(inj[t - 1, srcs.index(node.id)])
                vals.append(1.0)
            elif node.role == "load":
                cols.append(wdr[h, loads.index(node.id)])
                vals.append(-1.0)
            b.eq(cols, vals, 0.0, f"node balance {node.id} step {t}")

    meta = {
        "gas_model": gas_model,
        "vbar": vbar,
        "hours": T,
        "steps": S,
        "dt": dt,
        "steps_per_interval": spi,
    }
    return b.build(**meta)


def gas_size_per_step(lp: LinearProgram, pipe_id: str) -> tuple[int, int]:
    """Gas variables and dynamics rows one pipeline adds per gas step."""
    S = lp.meta["steps"]
    if lp.meta["gas_model"] == GLOBAL:
        n_vars = lp.blocks[f"psi:{pipe_id}"].size + lp.blocks[f"u:{pipe_id}"].size
        key = f"lifted dynamics {pipe_id} "
    else:
        n_vars = lp.blocks[f"p:{pipe_id}"].size + lp.blocks[f"m:{pipe_id}"].size
        key = f"fd mass {pipe_id} ", f"fd momentum {pipe_id} "
    keys = (key,) if isinstance(key, str) else key
    n_rows = sum(1 for lab in lp.eq_labels if lab.startswith(keys))
    return n_vars // S, n_rows // S


# ---------------------------------------------------------------------------
# solution


@dataclass(frozen=True)
class DispatchSolution:
    """Named dispatch quantities.

    Hourly arrays have ``hours`` rows; per-step arrays have ``steps`` rows,
    row ``t`` holding the state at the end of gas step ``t + 1``.
    """

    gas_model: str
    vbar: float | None
    hours: int
    dt: float
    generator_ids: tuple
    bus_ids: tuple
    p2g_ids: tuple
    source_ids: tuple
    load_ids: tuple
    node_ids: tuple
    generation: np.ndarray  # (T, n_gen) MW
    p2g: np.ndarray  # (T, n_p2g) MW
    theta: np.ndarray  # (T, n_bus) rad
    source_pressure: np.ndarray  # (T, n_src) Pa
    withdrawal: np.ndarray  # (T, n_load) kg/s
    node_pressure: np.ndarray  # (S, n_nodes) Pa
    injection: np.ndarray  # (S, n_src) kg/s
    pipes: dict  # pid -> {"p_in","m_in","p_out","m_out"} (S,) physical, plus "psi" (S, N) if global
    objective: float
    generation_cost: float
    gas_cost: float
    stats: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.injection.shape[0]

    @property
    def steps_per_interval(self) -> int:
        return self.steps // self.hours

    def extraction_mass(self) -> np.ndarray:
        """Planned source extraction per hour (kg), shape ``(hours, n_src)``."""
        spi = self.steps_per_interval
        return self.injection.reshape(self.hours, spi, -1).sum(axis=1) * self.dt


def extract_schedule(lp: LinearProgram, result: LPResult | np.ndarray, power: PowerSystemSpec,
                     coupling: CouplingSpec, gas: GasDispatchSpec) -> DispatchSolution:
    """Map the LP solution vector back to named physical quantities."""
    x = result.x if isinstance(result, LPResult) else np.asarray(result, dtype=float)
    B = lp.blocks
    net = gas.network
    others = _nonsource(net)
    T, S, spi = lp.meta["hours"], lp.meta["steps"], lp.meta["steps_per_interval"]
    src_p = x[B["src_p"]] * P_BASE
    node_p = np.empty((S, len(net.nodes)))
    for i, n in enumerate(net.nodes):
        if n.role == SOURCE:
            node_p[:, i] = np.repeat(src_p[:, net.sources.index(n.id)], spi)
        else:
            node_p[:, i] = x[B["node_p"][:, others.index(n.id)]] * P_BASE
    pipes = {}
    for pipe in net.pipelines:
        if lp.meta["gas_model"] == GLOBAL:
            model = gas.models[pipe.id]
            psi = x[B[f"psi:{pipe.id}"]]
            u = x[B[f"u:{pipe.id}"]]
            pipes[pipe.id] = {
                "p_in": u[:, 0] * model.p_base,
                "m_in": u[:, 1] * model.m_base,
                "p_out": psi[:, 0] * model.p_base,
                "m_out": psi[:, 1] * model.m_base,
                "psi": psi,
            }
        else:
            p = x[B[f"p:{pipe.id}"]] * P_BASE
            m = x[B[f"m:{pipe.id}"]] * M_BASE
            pipes[pipe.id] = {"p_in": p[:, 0], "m_in": m[:, 0], "p_out": p[:, -1], "m_out": m[:, -1]}
    gen = x[B["gen"]]
    gen_cost = float(np.sum(gen * np.array([g.cost for g in power.generators])))
    inj = x[B["injection"]] * M_BASE
    price = np.array([gas.sources[n].price for n in net.sources])
    gas_cost = float(np.sum(inj * price) * lp.meta["dt"])
    stats = {"n_vars": lp.n_vars, "n_eq": lp.n_eq, "n_ub": lp.n_ub}
    if isinstance(result, LPResult):
        stats.update(solve_time=result.solve_time, duality_gap=result.gap,
                     primal_residual=result.residual, iterations=result.iterations,
                     method=result.method)
    return DispatchSolution(
        gas_model=lp.meta["gas_model"],
        vbar=lp.meta["vbar"],
        hours=T,
        dt=lp.meta["dt"],
        generator_ids=tuple(g.id for g in power.generators),
        bus_ids=tuple(power.buses),
        p2g_ids=tuple(l.id for l in coupling.p2g),
        source_ids=tuple(net.sources),
        load_ids=tuple(net.loads),
        node_ids=tuple(n.id for n in net.nodes),
        generation=gen,
        p2g=x[B["p2g"]],
        theta=x[B["theta"]],
        source_pressure=src_p,
        withdrawal=x[B["withdrawal"]] * M_BASE,
        node_pressure=node_p,
        injection=inj,
        pipes=pipes,
        objective=float(lp.c @ x),
        generation_cost=gen_cost,
        gas_cost=gas_cost,
        stats=stats,
    )


def dispatch(power, coupling, gas, horizon=DispatchHorizon(), gas_model=GLOBAL, vbar=None):
    """Assemble, solve and extract in one call; returns ``(solution, lp)``."""
    lp = assemble_lp(power, coupling, gas, horizon, gas_model, vbar)
    res = solve_lp(lp)
    return extract_schedule(lp, res, power, coupling, gas), lp


# ---------------------------------------------------------------------------
# independent verification


def verify_solution(sol: DispatchSolution, power: PowerSystemSpec, coupling: CouplingSpec,
                    gas: GasDispatchSpec) -> dict:
    """Re-check every dispatch constraint from the stored schedule alone.

    Residuals are scaled like the LP rows (MW over ``1 + |load|`` for power,
    normalized units for gas); the result maps constraint families to the
    largest violation found.
    """
    T, S, spi = sol.hours, sol.steps, sol.steps_per_interval
    out = {}
    bus_idx = {b: i for i, b in enumerate(power.buses)}
    # power balance and limits
    worst = 0.0
    line_v = 0.0
    for h in range(T):
        inj = np.zeros(len(power.buses))
        for j, g in enumerate(power.generators):
            inj[bus_idx[g.bus]] += sol.generation[h, j]
        for j, link in enumerate(coupling.p2g):
            inj[bus_idx[link.bus]] -= sol.p2g[h, j]
        for ln in power.lines:
            f = power.base_mva * (sol.theta[h, bus_idx[ln.from_bus]] - sol.theta[h, bus_idx[ln.to_bus]]) / ln.reactance
            inj[bus_idx[ln.from_bus]] -= f
            inj[bus_idx[ln.to_bus]] += f
            if math.isfinite(ln.limit):
                line_v = max(line_v, (abs(f) - ln.limit) / (1 + ln.limit))
        for bus in power.buses:
            load = power.load(bus, h)
            worst = max(worst, abs(inj[bus_idx[bus]] - load) / (1 + abs(load)))
    out["power_balance"] = worst
    out["line_limits"] = max(line_v, 0.0)
    gv = 0.0
    for j, g in enumerate(power.generators):
        hi = np.asarray(g.availability[:T], float) if g.type == "wind" else np.full(T, g.p_max)
        lo = np.minimum(g.p_min, hi)
        gv = max(gv, float(np.max((sol.generation[:, j] - hi) / (1 + hi))),
                 float(np.max((lo - sol.generation[:, j]) / (1 + np.abs(lo)))))
        if math.isfinite(g.ramp):
            gv = max(gv, float(np.max(np.abs(np.diff(sol.generation[:, j])) - g.ramp)) / (1 + g.ramp))
    for j, link in enumerate(coupling.p2g):
        gv = max(gv, float(np.max(sol.p2g[:, j] - link.p_max)), float(np.max(link.p_min - sol.p2g[:, j])))
    out["unit_limits"] = max(gv, 0.0)
    out["angle_limits"] = max(0.0, float(np.max(np.abs(sol.theta))) - power.angle_limit)

    # gas withdrawals
    net = gas.network
    wv = 0.0
    for h in range(T):
        for l, node in enumerate(net.loads):
            w = gas.baseline(node, h)
            for link in coupling.gas_fired:
                if link.gas_node == node:
                    w += link.coefficient * sol.generation[h, sol.generator_ids.index(link.generator)]
            for j, link in enumerate(coupling.p2g):
                if link.gas_node == node:
                    w -= link.coefficient * sol.p2g[h, j]
            wv = max(wv, abs(w - sol.withdrawal[h, l]) / M_BASE)
    out["withdrawal"] = wv

    # pipeline dynamics, continuity and bounds
    node_idx = {n: i for i, n in enumerate(sol.node_ids)}
    dyn = cont = bnd = 0.0
    init = gas.initial_state
    for pipe in net.pipelines:
        d = sol.pipes[pipe.id]
        prm = pipe.params
        cont = max(cont,
                   float(np.max(np.abs(d["p_in"] - sol.node_pressure[:, node_idx[pipe.from_node]]))) / P_BASE,
                   float(np.max(np.abs(d["p_out"] - sol.node_pressure[:, node_idx[pipe.to_node]]))) / P_BASE)
        for key, lo, hi, base in (("p_in", prm.p_min, prm.p_max, P_BASE), ("p_out", prm.p_min, prm.p_max, P_BASE),
                                  ("m_in", prm.mfr_min, prm.mfr_max, M_BASE), ("m_out", prm.mfr_min, prm.mfr_max, M_BASE)):
            bnd = max(bnd, float(np.max(d[key] - hi)) / base, float(np.max(lo - d[key])) / base)
        g0 = init.grids[pipe.id]
        if sol.gas_model == GLOBAL:
            model = gas.models[pipe.id]
            psi = np.vstack([np.tile(lift(model.obs, [g0.pressures[-1] / model.p_base,
                                                      g0.mfrs[-1] / model.m_base]), (model.delays.dx, 1)),
                             d["psi"]])
            u_hist = np.column_stack([d["p_in"] / model.p_base, d["m_in"] / model.m_base])
            u0 = np.array([g0.pressures[0] / model.p_base, g0.mfrs[0] / model.m_base])
            u = np.vstack([np.tile(u0, (model.delays.du + 1, 1)), u_hist])
            Dx, Du = model.delays.dx, model.delays.du
            for t in range(S):
                pred = sum(Kx @ psi[Dx + t - i] for i, Kx in enumerate(model.Kx, start=1))
                pred = pred + sum(Ku @ u[Du + 1 + t - i] for i, Ku in enumerate(model.Ku))
                dyn = max(dyn, float(np.max(np.abs(pred - psi[Dx + t]))))
            cont = max(cont, float(np.max(np.abs(psi[model.delays.dx:, 0] * model.p_base - d["p_out"]))) / P_BASE)
    for n, node in enumerate(net.nodes):
        bnd = max(bnd, float(np.max(sol.node_pressure[:, n] - node.p_max)) / P_BASE,
                  float(np.max(node.p_min - sol.node_pressure[:, n])) / P_BASE)
    for j, nid in enumerate(net.sources):
        src = gas.sources[nid]
        bnd = max(bnd, float(np.max(sol.source_pressure[:, j] - src.p_max)) / P_BASE,
                  float(np.max(src.p_min - sol.source_pressure[:, j])) / P_BASE)
    bnd = max(bnd, float(np.max(-sol.injection)) / M_BASE)
    out["gas_dynamics"] = dyn
    out["pressure_continuity"] = cont
    out["gas_bounds"] = max(bnd, 0.0)

    # node balance
    nb = 0.0
    for t in range(S):
        h = t // spi
        for node in net.nodes:
            bal = 0.0
            for pipe in net.pipelines:
                if pipe.to_node == node.id:
                    bal += sol.pipes[pipe.id]["m_out"][t]
                if pipe.from_node == node.id:
                    bal -= sol.pipes[pipe.id]["m_in"][t]
            if node.role == SOURCE:
                bal += sol.injection[t, net.sources.index(node.id)]
            elif node.role == "load":
                bal -= sol.withdrawal[h, net.loads.index(node.id)]
            nb = max(nb, abs(bal) / M_BASE)
    out["node_balance"] = nb
    out["max"] = max(out.values())
    return out


# ---------------------------------------------------------------------------
# persistence


def _arr(a):
    return np.asarray(a).tolist()


def solution_to_dict(sol: DispatchSolution) -> dict:
    return {
        "version": SOLUTION_VERSION,
        "gas_model": sol.gas_model,
        "vbar": sol.vbar,
        "hours": sol.hours,
        "dt_seconds": sol.dt,
        "generator_ids": list(sol.generator_ids),
        "bus_ids": list(sol.bus_ids),
        "p2g_ids": list(sol.p2g_ids),
        "source_ids": list(sol.source_ids),
        "load_ids": list(sol.load_ids),
        "node_ids": list(sol.node_ids),
        "objective": sol.objective,
        "generation_cost": sol.generation_cost,
        "gas_cost": sol.gas_cost,
        "stats": sol.stats,
        "generation": _arr(sol.generation),
        "p2g": _arr(sol.p2g),
        "theta": _arr(sol.theta),
        "source_pressure": _arr(sol.source_pressure),
        "withdrawal": _arr(sol.withdrawal),
        "node_pressure": _arr(sol.node_pressure),
        "injection": _arr(sol.injection),
        "pipes": {pid: {k: _arr(v) for k, v in d.items()} for pid, d in sol.pipes.items()},
    }


def solution_from_dict(data: dict) -> DispatchSolution:
    if data.get("version") != SOLUTION_VERSION:
        raise SchemaMismatch(f"solution version {data.get('version')!r}, expected {SOLUTION_VERSION}")
    try:
        def arr2(key, cols):
            a = np.asarray(data[key], dtype=float)
            return a.reshape(-1, cols) if a.size == 0 else a

        return DispatchSolution(
            gas_model=data["gas_model"],
            vbar=data["vbar"],
            hours=int(data["hours"]),
            dt=float(data["dt_seconds"]),
            generator_ids=tuple(data["generator_ids"]),
            bus_ids=tuple(data["bus_ids"]),
            p2g_ids=tuple(data["p2g_ids"]),
            source_ids=tuple(data["source_ids"]),
            load_ids=tuple(data["load_ids"]),
            node_ids=tuple(data["node_ids"]),
            generation=arr2("generation", len(data["generator_ids"])),
            p2g=np.asarray(data["p2g"], dtype=float).reshape(int(data["hours"]), len(data["p2g_ids"])),
            theta=arr2("theta", len(data["bus_ids"])),
            source_pressure=arr2("source_pressure", len(data["source_ids"])),
            withdrawal=np.asarray(data["withdrawal"], dtype=float).reshape(int(data["hours"]), len(data["load_ids"])),
            node_pressure=arr2("node_pressure", len(data["node_ids"])),
            injection=arr2("injection", len(data["source_ids"])),
            pipes={pid: {k: np.asarray(v, dtype=float) for k, v in d.items()} for pid, d in data["pipes"].items()},
            objective=float(data["objective"]),
            generation_cost=float(data["generation_cost"]),
            gas_cost=float(data["gas_cost"]),
            stats=dict(data.get("stats", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"malformed dispatch solution: {exc}") from exc


def save_solution(sol: DispatchSolution, directory) -> list[Path]:
    """Write ``solution.json`` plus ``schedule.csv`` (hourly) and ``gas_states.csv`` (per step)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / "solution.json", directory / "schedule.csv", directory / "gas_states.csv"]
    paths[0].write_text(json.dumps(solution_to_dict(sol), indent=1))
    mass = sol.extraction_mass()
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hour"] + [f"gen_{g}" for g in sol.generator_ids] + [f"p2g_{p}" for p in sol.p2g_ids]
                   + [f"theta_{b}" for b in sol.bus_ids] + [f"p_src_{s}" for s in sol.source_ids]
                   + [f"extraction_kg_{s}" for s in sol.source_ids] + [f"w_{l}" for l in sol.load_ids])
        for h in range(sol.hours):
            w.writerow([h] + [repr(float(v)) for v in np.concatenate(
                [sol.generation[h], sol.p2g[h], sol.theta[h], sol.source_pressure[h], mass[h], sol.withdrawal[h]])])
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh)
        pids = list(sol.pipes)
        w.writerow(["step", "t"] + [f"{k}_{pid}" for pid in pids for k in ("p_in", "m_in", "p_out", "m_out")]
                   + [f"P_{n}" for n in sol.node_ids] + [f"inj_{s}" for s in sol.source_ids])
        for t in range(sol.steps):
            row = [t + 1, repr((t + 1) * sol.dt)]
            for pid in pids:
                row += [repr(float(sol.pipes[pid][k][t])) for k in ("p_in", "m_in", "p_out", "m_out")]
            row += [repr(float(v)) for v in sol.node_pressure[t]] + [repr(float(v)) for v in sol.injection[t]]
            w.writerow(row)
    return paths


def load_solution(directory) -> DispatchSolution:
    path = Path(directory)
    if path.is_dir():
        path = path / "solution.json"
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path}: not valid JSON ({exc})") from exc
    return solution_from_dict(data)
