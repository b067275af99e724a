"""JSON configuration files: single pipelines, gas networks and dispatch scenarios.

Validation errors name the offending field path, e.g. ``power.generators[2].bus``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dispatch_opt import (
    CouplingSpec,
    DispatchHorizon,
    GasDispatchSpec,
    GasFiredLink,
    Generator,
    Line,
    P2GLink,
    PowerSystemSpec,
    SourceSpec,
)
from .errors import KoopgasError, SpecError
from .gas_dynamics import PipelineParams
from .koopman_id import DelayConfig, load_model
from .network import GasNetworkSpec
from .snapshots import ExcitationConfig

BUNDLED = ("fig1_pipeline.json", "desk7_scenario.json", "stress20_network.json")


class ConfigError(SpecError):
    """Configuration file missing, unreadable or invalid."""


def bundled_path(name: str) -> Path:
    """Path of a config shipped with the package."""
    path = Path(str(resources.files("koopgas") / "data" / name))
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}; available: {', '.join(BUNDLED)}")
    return path


def resolve(path) -> Path:
    """Accept a filesystem path or the bare name of a bundled config."""
    p = Path(path)
    if p.exists():
        return p
    if p.name in BUNDLED and p.parent == Path("."):
        return bundled_path(p.name)
    raise ConfigError(f"config file not found: {path}")


def read_json(path) -> dict:
    path = resolve(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def file_hash(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _req(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"{where}.{key}: required field missing")
    return d[key]


def _num(d: dict, key: str, where: str, default=None):
    val = d.get(key, default) if isinstance(d, dict) else default
    if val is None:
        raise ConfigError(f"{where}.{key}: required field missing")
    if val == "inf":
        return math.inf
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        raise ConfigError(f"{where}.{key}: expected a number, got {val!r}")
    return float(val)


def _wrap(where: str, fn, *args):
    try:
        return fn(*args)
    except ConfigError:
        raise
    except (KoopgasError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# ---------------------------------------------------------------------------
# pipelines and networks


def pipeline_from_dict(d: dict, where: str = "pipeline") -> PipelineParams:
    for key in ("length", "diameter", "friction_factor", "sound_speed"):
        _num(d, key, where)
    return _wrap(where, PipelineParams.from_dict, d)


def network_from_dict(d: dict, where: str = "network") -> GasNetworkSpec:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    for i, raw in enumerate(_req(d, "pipelines", where)):
        for key in ("id", "from", "to"):
            _req(raw, key, f"{where}.pipelines[{i}]")
        for key in ("length", "diameter", "friction_factor", "sound_speed"):
            _num(raw, key, f"{where}.pipelines[{i}]")
    for i, raw in enumerate(_req(d, "nodes", where)):
        _req(raw, "id", f"{where}.nodes[{i}]")
    return _wrap(where, GasNetworkSpec.from_dict, d)


@dataclass(frozen=True)
class PipelineScenario:
    """Single pipeline transient: constant inlet pressure, stepped outlet flow."""

    params: PipelineParams
    dt: float
    hours: float
    inlet_pressure: float
    initial_mfr: float
    steps: tuple  # ((time_hours, mfr), ...)
    segments: int | None = None
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)

    def outlet_mfr_at(self, t_seconds: float) -> float:
        m = self.initial_mfr
        for th, val in self.steps:
            if t_seconds >= th * 3600 - 1e-9:
                m = val
        return m


def load_pipeline_config(path) -> PipelineScenario:
    d = read_json(path)
    where = "pipeline"
    params = pipeline_from_dict(_req(d, "pipeline", ""), where)
    sc = d.get("scenario", {})
    steps = tuple((float(s["time_hours"]), float(s["mfr"])) for s in sc.get("outlet_steps", []))
    exc = _wrap("excitation", lambda: ExcitationConfig(**d.get("excitation", {})))
    return PipelineScenario(
        params,
        _num(sc, "dt_seconds", "scenario", 900.0),
        _num(sc, "hours", "scenario", 4.0),
        _num(sc, "inlet_pressure", "scenario", 5.78e6),
        _num(sc, "initial_mfr", "scenario", params.mfr_min),
        steps,
        d.get("segments"),
        exc,
    )


def load_network_config(path) -> tuple[GasNetworkSpec, dict]:
    """Return the network plus the raw document (boundary data lives beside it)."""
    d = read_json(path)
    net = network_from_dict(d["network"] if "network" in d else d.get("gas", {}).get("network", d))
    return net, d


@dataclass(frozen=True)
class NetworkScenario:
    """Network transient: hourly source pressures and withdrawals held over ``dt`` steps."""

    network: GasNetworkSpec
    dt: float
    hours: int
    source_pressures: dict  # node -> hourly values
    withdrawals: dict

    def boundary(self):
        from .transient_sim import BoundaryProfile

        spi = int(round(3600 / self.dt))
        steps = self.hours * spi
        hour = np.minimum(np.arange(steps) // spi, self.hours - 1)
        p = np.column_stack([np.asarray(self.source_pressures[n])[hour] for n in self.network.sources])
        w = np.column_stack([np.asarray(self.withdrawals[n])[hour] for n in self.network.loads])
        return BoundaryProfile(self.dt * np.arange(1, steps + 1), p, w)


def _hourly(val, hours: int, where: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(val, dtype=float))
    if arr.size == 1:
        arr = np.full(hours, arr[0])
    if arr.size != hours:
        raise ConfigError(f"{where}: expected {hours} hourly values, got {arr.size}")
    return arr


def load_network_scenario(path) -> NetworkScenario:
    net, d = load_network_config(path)
    b = _req(d, "boundary", "")
    hours = int(b.get("hours", 24))
    dt = _num(b, "dt_seconds", "boundary", 900.0)
    if dt <= 0 or 3600 % dt > 1e-9 * 3600:
        raise ConfigError("boundary.dt_seconds: must divide one hour")
    sp, wd = _req(b, "source_pressures", "boundary"), _req(b, "withdrawals", "boundary")
    for n in net.sources:
        _req(sp, n, "boundary.source_pressures")
    for n in net.loads:
        _req(wd, n, "boundary.withdrawals")
    return NetworkScenario(
        net, dt, hours,
        {n: _hourly(sp[n], hours, f"boundary.source_pressures.{n}") for n in net.sources},
        {n: _hourly(wd[n], hours, f"boundary.withdrawals.{n}") for n in net.loads},
    )


# ---------------------------------------------------------------------------
# dispatch scenarios


@dataclass(frozen=True)
class TrainingSettings:
    count: int = 4000
    seed: int = 0
    delays: DelayConfig = DelayConfig()
    observables: str = "pressure"
    epsilon: float = 1e-3
    mode: str = "sum"
    pressure_band: float = 0.06
    flow_band: tuple = (0.75, 1.25)
    overrides: dict = field(default_factory=dict)

    def excitation_for(self, pipe_id: str, p_in: float, mfr: float) -> ExcitationConfig:
        """Excitation centred on a pipeline's initial operating point unless overridden."""
        from .transient_sim import M_BASE

        base = dict(nominal_pressure=p_in, pressure_band=self.pressure_band,
                    mfr_low=self.flow_band[0] * mfr / M_BASE, mfr_high=self.flow_band[1] * mfr / M_BASE)
        base.update(self.overrides.get(pipe_id, {}))
        return ExcitationConfig(**base)


@dataclass(frozen=True)
class Scenario:
    name: str
    power: PowerSystemSpec
    coupling: CouplingSpec
    gas: GasDispatchSpec
    horizon: DispatchHorizon
    training: TrainingSettings
    model_template: str
    resolutions: tuple
    vbars: tuple
    path: Path | None = None

    def model_path(self, root, pipe_id: str, dt: float) -> Path:
        minutes = int(round(dt / 60))
        return Path(root) / self.model_template.format(minutes=minutes, pipeline=pipe_id)

    def with_dt(self, dt: float) -> "Scenario":
        from dataclasses import replace

        return replace(self, horizon=DispatchHorizon(self.horizon.hours, self.horizon.control_interval, dt))

    def load_models(self, root, dt: float | None = None) -> GasDispatchSpec:
        dt = self.horizon.dt if dt is None else dt
        models = {}
        for pipe in self.gas.network.pipelines:
            path = self.model_path(root, pipe.id, dt)
            if not path.exists():
                raise ConfigError(f"model file for pipeline {pipe.id} not found: {path}")
            models[pipe.id] = load_model(path)
        return self.gas.with_models(models)


def _power(d: dict) -> PowerSystemSpec:
    where = "power"
    lines = []
    for i, ln in enumerate(_req(d, "lines", where)):
        w = f"{where}.lines[{i}]"
        lines.append(Line(str(_req(ln, "id", w)), str(_req(ln, "from", w)), str(_req(ln, "to", w)),
                          _num(ln, "reactance", w), _num(ln, "limit", w, math.inf)))
    gens = []
    for i, g in enumerate(_req(d, "generators", where)):
        w = f"{where}.generators[{i}]"
        avail = g.get("availability")
        gens.append(_wrap(w, Generator, str(_req(g, "id", w)), str(_req(g, "bus", w)), str(_req(g, "type", w)),
                          _num(g, "p_min", w, 0.0), _num(g, "p_max", w), _num(g, "cost", w, 0.0),
                          _num(g, "ramp", w, math.inf), tuple(avail) if avail is not None else None))
    loads = {str(k): tuple(float(x) for x in v) for k, v in d.get("loads", {}).items()}
    return _wrap(where, PowerSystemSpec, tuple(_req(d, "buses", where)), tuple(lines), tuple(gens), loads,
                 str(_req(d, "slack", where)), _num(d, "base_mva", where, 100.0),
                 _num(d, "angle_limit", where, math.pi))


def _coupling(d: dict) -> CouplingSpec:
    gf = []
    for i, c in enumerate(d.get("gas_fired", [])):
        w = f"coupling.gas_fired[{i}]"
        gf.append(GasFiredLink(str(_req(c, "generator", w)), str(_req(c, "gas_node", w)), _num(c, "coefficient", w)))
    p2g = []
    for i, c in enumerate(d.get("p2g", [])):
        w = f"coupling.p2g[{i}]"
        p2g.append(P2GLink(str(_req(c, "id", w)), str(_req(c, "bus", w)), str(_req(c, "gas_node", w)),
                           _num(c, "coefficient", w), _num(c, "p_min", w, 0.0), _num(c, "p_max", w)))
    return _wrap("coupling", CouplingSpec, tuple(gf), tuple(p2g))


def _training(d: dict) -> TrainingSettings:
    where = "gas.training"
    delays = d.get("delays", {})
    return _wrap(where, TrainingSettings,
                 int(d.get("count", 4000)), int(d.get("seed", 0)),
                 DelayConfig(int(delays.get("dx", 3)), int(delays.get("du", 2))),
                 str(d.get("observables", "pressure")), float(d.get("epsilon", 1e-3)),
                 str(d.get("mode", "sum")), float(d.get("pressure_band", 0.06)),
                 tuple(d.get("flow_band", (0.75, 1.25))), dict(d.get("overrides", {})))


def load_scenario(path) -> Scenario:
    path = resolve(path)
    d = read_json(path)
    power = _power(_req(d, "power", ""))
    coupling = _coupling(d.get("coupling", {}))
    g = _req(d, "gas", "")
    net = network_from_dict(_req(g, "network", "gas"), "gas.network")
    sources = {}
    for nid, s in _req(g, "sources", "gas").items():
        w = f"gas.sources.{nid}"
        sources[nid] = SourceSpec(_num(s, "price", w), _num(s, "p_min", w), _num(s, "p_max", w), _num(s, "p_init", w))
    loads = {str(k): tuple(float(x) for x in v) for k, v in g.get("loads", {}).items()}
    init_w = g.get("initial_withdrawal")
    gas = _wrap("gas", GasDispatchSpec, net, sources, loads, {}, init_w)
    hz = d.get("horizon", {})
    horizon = _wrap("horizon", DispatchHorizon, int(hz.get("hours", 24)),
                    float(hz.get("control_interval_seconds", 3600.0)), float(hz.get("dt_seconds", 900.0)))
    models = g.get("models", {})
    ev = d.get("evaluation", {})
    return Scenario(
        str(d.get("name", path.stem)), power, coupling, gas, horizon, _training(g.get("training", {})),
        str(models.get("template", "{minutes}min/{pipeline}.json")),
        tuple(float(r) for r in ev.get("resolutions_minutes", (15, 30, 60))),
        tuple(float(v) for v in ev.get("vbars", (0.0, 1.0, 2.0))),
        path,
    )
