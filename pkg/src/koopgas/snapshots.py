"""Identification datasets generated with the nonlinear simulator."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ExcitationOutOfBounds, NonPhysicalSteadyState, SchemaMismatch
from .gas_dynamics import NONLINEAR, PipelineParams, steady_state_profile
from .transient_sim import M_BASE, P_BASE, BoundaryProfile, simulate_pipeline

CSV_HEADER = ["t", "p_in", "m_in", "p_out", "m_out"]


@dataclass(frozen=True)
class ExcitationConfig:
    """Random boundary excitation.

    The inlet pressure follows a random walk with steps drawn uniformly from
    ``[-pressure_step, pressure_step] * p_base`` per model step, reflected at
    ``nominal_pressure * (1 +/- pressure_band)``. The outlet flow holds for a
    random 2-6 h and then jumps to a value drawn uniformly from
    ``[mfr_low, mfr_high] * m_base``, clipped to the pipeline limits.
    """

    nominal_pressure: float = 5.78e6
    pressure_band: float = 0.10
    pressure_step: float = 0.005
    mfr_low: float = 0.5
    mfr_high: float = 2.0
    hold_min_hours: float = 2.0
    hold_max_hours: float = 6.0
    settle_hours: float = 24.0
    substeps: int = 1
    constant: bool = False

    def pressure_range(self):
        return (self.nominal_pressure * (1 - self.pressure_band),
                self.nominal_pressure * (1 + self.pressure_band))

    def mfr_range(self, params: PipelineParams, m_base: float = M_BASE):
        return (max(self.mfr_low * m_base, params.mfr_min), min(self.mfr_high * m_base, params.mfr_max))


@dataclass(frozen=True)
class SnapshotSet:
    """Normalized boundary inputs ``u = (p_in, m_in)`` and outlet states ``x = (p_out, m_out)``."""

    u: np.ndarray
    x: np.ndarray
    dt: float
    p_base: float = P_BASE
    m_base: float = M_BASE
    seed: int | None = None
    pipeline_id: str = "pipe"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if u.ndim != 2 or u.shape[1] != 2 or u.shape != x.shape:
            raise SchemaMismatch("u and x must both have shape (count, 2)")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "x", x)

    def __len__(self):
        return self.u.shape[0]

    def physical(self):
        """Return ``(u, x)`` denormalized to Pa and kg/s."""
        scale = np.array([self.p_base, self.m_base])
        return self.u * scale, self.x * scale

    def sidecar_path(self, path) -> Path:
        return Path(path).with_suffix(".json")

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for i in range(len(self)):
                w.writerow([repr(i * self.dt), repr(float(self.u[i, 0])), repr(float(self.u[i, 1])),
                            repr(float(self.x[i, 0])), repr(float(self.x[i, 1]))])
        meta = {
            "pipeline_id": self.pipeline_id,
            "dt_seconds": self.dt,
            "base_pressure": self.p_base,
            "base_mfr": self.m_base,
            "seed": self.seed,
            "count": len(self),
            **self.meta,
        }
        self.sidecar_path(path).write_text(json.dumps(meta, indent=2))

    @classmethod
    def from_csv(cls, path) -> "SnapshotSet":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise SchemaMismatch(f"{path}: expected header {CSV_HEADER}, got {header}")
            rows = np.array([[float(v) for v in row] for row in reader])
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        if rows.size == 0:
            raise SchemaMismatch(f"{path}: no snapshots")
        dt = meta.get("dt_seconds", float(rows[1, 0] - rows[0, 0]) if len(rows) > 1 else 900.0)
        extra = {k: v for k, v in meta.items()
                 if k not in ("pipeline_id", "dt_seconds", "base_pressure", "base_mfr", "seed", "count")}
        return cls(rows[:, 1:3], rows[:, 3:5], float(dt), meta.get("base_pressure", P_BASE),
                   meta.get("base_mfr", M_BASE), meta.get("seed"), meta.get("pipeline_id", path.stem),
                   extra)


def excitation_profile(params: PipelineParams, cfg: ExcitationConfig, steps: int, dt: float,
                       rng: np.random.Generator, p_base=P_BASE, m_base=M_BASE):
    """Draw ``steps`` values of inlet pressure and outlet flow, one per model step."""
    lo, hi = cfg.pressure_range()
    m_lo, m_hi = cfg.mfr_range(params, m_base)
    p = np.empty(steps)
    m = np.empty(steps)
    if cfg.constant:
        p[:] = cfg.nominal_pressure
        m[:] = np.clip(m_base, m_lo, m_hi)
        return p, m
    cur_p = cfg.nominal_pressure
    cur_m = rng.uniform(m_lo, m_hi)
    hold = 0
    hmin = max(1, int(round(cfg.hold_min_hours * 3600 / dt)))
    hmax = max(hmin, int(round(cfg.hold_max_hours * 3600 / dt)))
    for i in range(steps):
        cur_p += rng.uniform(-cfg.pressure_step, cfg.pressure_step) * p_base
        # reflect into the band
        while cur_p > hi or cur_p < lo:
            cur_p = 2 * hi - cur_p if cur_p > hi else 2 * lo - cur_p
        if hold <= 0:
            cur_m = float(np.clip(rng.uniform(cfg.mfr_low, cfg.mfr_high) * m_base, m_lo, m_hi))
            hold = int(rng.integers(hmin, hmax + 1))
        hold -= 1
        p[i] = cur_p
        m[i] = cur_m
    return p, m


def _check_excitation(params: PipelineParams, cfg: ExcitationConfig, m_base):
    lo, hi = cfg.pressure_range()
    if lo < params.p_min or hi > params.p_max:
        raise ExcitationOutOfBounds(
            f"{params.name}: pressure band [{lo:.4g}, {hi:.4g}] Pa leaves [{params.p_min:.4g}, {params.p_max:.4g}]"
        )
    m_lo, m_hi = cfg.mfr_range(params, m_base)
    if m_lo > m_hi:
        raise ExcitationOutOfBounds(f"{params.name}: flow band is empty after clipping to limits")
    try:
        steady_state_profile(params, lo, m_hi, 2)
    except NonPhysicalSteadyState as exc:
        raise ExcitationOutOfBounds(f"{params.name}: band cannot be carried: {exc}") from exc


def generate_snapshots(
    params: PipelineParams,
    excitation: ExcitationConfig,
    count: int,
    dt: float,
    seed: int = 0,
    K: int | None = None,
    p_base: float = P_BASE,
    m_base: float = M_BASE,
) -> SnapshotSet:
    """Simulate the pipeline under random excitation and record ``count`` snapshots.

    The first ``settle_hours`` of simulated time are discarded. The simulator
    runs ``excitation.substeps`` backward-Euler steps per snapshot interval
    while boundary values stay constant within the interval.
    """
    _check_excitation(params, excitation, m_base)
    K = K or params.default_segments()
    rng = np.random.default_rng(seed)
    settle = int(round(excitation.settle_hours * 3600 / dt))
    total = settle + count
    p_in, m_out = excitation_profile(params, excitation, total, dt, rng, p_base, m_base)
    sub = max(1, int(excitation.substeps))
    h = dt / sub
    times = h * np.arange(1, total * sub + 1)
    boundary = BoundaryProfile(times, np.repeat(p_in, sub), np.repeat(m_out, sub))
    init = steady_state_profile(params, p_in[0], m_out[0], K)
    traj = simulate_pipeline(params, K, h, boundary, init, NONLINEAR)
    pid = params.name
    idx = sub * np.arange(settle + 1, total + 1)
    u = np.column_stack([traj.inlet_pressure(pid)[idx] / p_base, traj.inlet_mfr(pid)[idx] / m_base])
    x = np.column_stack([traj.outlet_pressure(pid)[idx] / p_base, traj.outlet_mfr(pid)[idx] / m_base])
    meta = {
        "segments": K,
        "substeps": sub,
        "excitation": {k: getattr(excitation, k) for k in excitation.__dataclass_fields__},
        "pipeline": params.to_dict(),
    }
    return SnapshotSet(u, x, float(dt), p_base, m_base, seed, pid, meta)
