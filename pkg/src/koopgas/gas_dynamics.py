"""Isothermal gas flow in a horizontal pipeline.

Continuous model (mass flow rate ``M`` and pressure ``p``)::

    dp/dt + (c^2/A) dM/dx = 0
    dp/dx + (1/A) dM/dt + F(p, M) = 0

with the nonlinear friction ``F = lambda c^2 M|M| / (2 d A^2 p)`` or the
average-velocity friction ``F = lambda vbar M / (2 d A)``.

The semi-discrete form splits the pipeline into ``K`` equal elements. Node 0
is the inlet, node ``K`` the outlet, and element ``k`` spans nodes ``k-1`` and
``k``. Storage of element ``k`` is carried by the pressure at its outlet node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NonPhysicalSteadyState, SpecError

NONLINEAR = "nonlinear"
LOCAL = "local"

#: Relative band around the limits used by the diagnostic pressure check.
PRESSURE_SLACK = 0.05


@dataclass(frozen=True)
class PipelineParams:
    """Physical constants of one pipeline (SI units)."""

    length: float
    diameter: float
    friction_factor: float
    sound_speed: float
    mfr_min: float = 0.0
    mfr_max: float = 100.0
    p_min: float = 1.0e6
    p_max: float = 8.0e6
    name: str = "pipe"

    def __post_init__(self):
        for attr in ("length", "diameter", "friction_factor", "sound_speed"):
            value = getattr(self, attr)
            if not (math.isfinite(value) and value > 0):
                raise SpecError(f"{self.name}: {attr} must be positive, got {value}")
        if not self.mfr_min < self.mfr_max:
            raise SpecError(f"{self.name}: mfr_min must be below mfr_max")
        if not 0 < self.p_min < self.p_max:
            raise SpecError(f"{self.name}: need 0 < p_min < p_max")

    @property
    def area(self) -> float:
        return math.pi * self.diameter**2 / 4.0

    def default_segments(self) -> int:
        """Number of elements giving cells of roughly 5 km (at least 2)."""
        return max(2, round(self.length / 5000.0))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "length": self.length,
            "diameter": self.diameter,
            "friction_factor": self.friction_factor,
            "sound_speed": self.sound_speed,
            "mfr_min": self.mfr_min,
            "mfr_max": self.mfr_max,
            "p_min": self.p_min,
            "p_max": self.p_max,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineParams":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


@dataclass(frozen=True)
class GridState:
    """Pressures and mass flow rates at the ``K + 1`` nodes of a pipeline."""

    pressures: np.ndarray
    mfrs: np.ndarray
    segment_length: float = field(default=0.0)

    def __post_init__(self):
        p = np.array(self.pressures, dtype=float)
        m = np.array(self.mfrs, dtype=float)
        if p.ndim != 1 or p.shape != m.shape or p.size < 2:
            raise DomainError("pressures and mfrs must be 1-D arrays of equal length >= 2")
        p.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "pressures", p)
        object.__setattr__(self, "mfrs", m)

    @property
    def segments(self) -> int:
        return self.pressures.size - 1

    def within_limits(self, params: PipelineParams, slack: float = PRESSURE_SLACK) -> bool:
        lo = params.p_min * (1.0 - slack)
        hi = params.p_max * (1.0 + slack)
        return bool(np.all((self.pressures >= lo) & (self.pressures <= hi)))


def _check_mode(mode: str, vbar: float | None) -> None:
    if mode == LOCAL:
        if vbar is None:
            raise DomainError("local friction needs an average velocity vbar")
    elif mode != NONLINEAR:
        raise DomainError(f"unknown friction mode {mode!r}")


def steady_state_profile(params: PipelineParams, p_in: float, mfr: float, K: int) -> GridState:
    """Closed-form steady state ``p(x)^2 = p_in^2 - lambda c^2 M|M| x / (d A^2)``.

    Raises
    ------
    NonPhysicalSteadyState
        If the squared pressure at the outlet is not positive.
    """
    if p_in <= 0:
        raise DomainError(f"inlet pressure must be positive, got {p_in}")
    if K < 1:
        raise DomainError("K must be at least 1")
    A = params.area
    coef = params.friction_factor * params.sound_speed**2 / (params.diameter * A**2)
    drop = coef * mfr * abs(mfr)
    x = np.linspace(0.0, params.length, K + 1)
    radicand = p_in**2 - drop * x
    if radicand[-1] <= 0:
        raise NonPhysicalSteadyState(
            f"{params.name}: {mfr} kg/s cannot be carried from {p_in} Pa "
            f"(outlet p^2 = {radicand[-1]:.4g})"
        )
    return GridState(np.sqrt(radicand), np.full(K + 1, float(mfr)), params.length / K)


def friction_term(
    params: PipelineParams, p, mfr, mode: str = NONLINEAR, vbar: float | None = None
):
    """Friction contribution to the pressure gradient, in Pa/m.

    Nonlinear mode uses ``M|M|`` so friction always opposes the flow.
    """
    _check_mode(mode, vbar)
    A = params.area
    d = params.diameter
    lam = params.friction_factor
    if mode == LOCAL:
        return lam * vbar * np.asarray(mfr, dtype=float) / (2.0 * d * A)
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise DomainError("nonlinear friction requires positive pressure")
    m = np.asarray(mfr, dtype=float)
    return lam * params.sound_speed**2 * m * np.abs(m) / (2.0 * d * A**2 * p)


def friction_derivatives(params: PipelineParams, p, mfr, mode: str = NONLINEAR, vbar=None):
    """Return ``(F, dF/dp, dF/dM)`` for the selected friction law."""
    F = friction_term(params, p, mfr, mode, vbar)
    A = params.area
    if mode == LOCAL:
        dFdM = np.full_like(F, params.friction_factor * vbar / (2.0 * params.diameter * A))
        return F, np.zeros_like(F), dFdM
    p = np.asarray(p, dtype=float)
    m = np.asarray(mfr, dtype=float)
    dFdM = params.friction_factor * params.sound_speed**2 * np.abs(m) / (params.diameter * A**2 * p)
    return F, -F / p, dFdM


def semi_discrete_rhs(
    params: PipelineParams,
    grid: GridState,
    mode: str = NONLINEAR,
    vbar: float | None = None,
    p_in: float | None = None,
    mfr_out: float | None = None,
):
    """Time derivatives of the outlet-node states of every element.

    ``p_in`` and ``mfr_out`` optionally override the boundary values stored
    in ``grid``. Returns ``(dp_dt, dM_dt)`` of length ``K`` for nodes
    ``1..K``. Nonlinear friction is evaluated at the element averages, which
    reproduces ``lambda c^2 (M_out + M_in)^2 / (4 d A (p_out + p_in))``.
    """
    _check_mode(mode, vbar)
    p = np.array(grid.pressures, dtype=float)
    m = np.array(grid.mfrs, dtype=float)
    if p_in is not None:
        p[0] = p_in
    if mfr_out is not None:
        m[-1] = mfr_out
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(m))):
        raise DomainError("grid contains non-finite values")
    dx = params.length / (p.size - 1)
    A = params.area
    c2 = params.sound_speed**2
    dp_dt = -(c2 / A) * (m[1:] - m[:-1]) / dx
    p_avg = 0.5 * (p[1:] + p[:-1])
    m_avg = 0.5 * (m[1:] + m[:-1])
    dm_dt = -A * (p[1:] - p[:-1]) / dx - A * friction_term(params, p_avg, m_avg, mode, vbar)
    return dp_dt, dm_dt


def linepack(params: PipelineParams, grid: GridState) -> float:
    """Gas mass (kg) stored in the pipeline according to the element storage."""
    dx = params.length / grid.segments
    return float(np.sum(grid.pressures[1:]) * params.area * dx / params.sound_speed**2)


def mean_velocity(params: PipelineParams, p: float, mfr: float) -> float:
    """Gas velocity ``v = M c^2 / (p A)`` in m/s."""
    return mfr * params.sound_speed**2 / (p * params.area)
