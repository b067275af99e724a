"""Delay-embedded Koopman models of single pipelines.

A model maps the lifted outlet state history and the inlet input history to
the next lifted outlet state::

    psi[t] = sum_{i=1..Dx} Kx[i] psi[t-i] + sum_{i=0..Du} Ku[i] u[t-i]

States are normalized ``x = (p_out / P_b, m_out / M_b)`` and inputs
``u = (p_in / P_b, m_in / M_b)``. The first two lifted coordinates are the
state itself, so ``C = [I 0]`` extracts it.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import (
    DimensionMismatch,
    InsufficientData,
    NonConvergence,
    RankDeficient,
    SchemaMismatch,
    VersionError,
)
from .snapshots import SnapshotSet

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RIDGE = 1e-10
DEFAULT_EPSILON = 1e-3
FIT_TOL = 1e-7  # certified relative suboptimality of the constrained fit
FIT_MAX_NEWTON = 1000
BARRIER_MU = 20.0
BARRIER_CENTERING = 2e-10

STABILITY_MODES = ("sum", "per_block", "scaled")


# ---------------------------------------------------------------------------
# observables


def _neg_x_exp(x):
    return -x * np.exp(-x)


def _exp_sin(x):
    return np.exp(-x) * np.sin(-x)


MAPS = {"neg_x_exp": _neg_x_exp, "exp_sin": _exp_sin}


@dataclass(frozen=True)
class ObservableSet:
    """Dictionary of observables.

    ``extra`` lists ``(component, map_name)`` pairs appended after the two
    state coordinates; component 0 is pressure and 1 is flow.
    """

    name: str
    extra: tuple = ()

    @property
    def N(self) -> int:
        return 2 + len(self.extra)

    def sample_check(self, lo=-2.0, hi=2.0, n=401) -> bool:
        """True if every map and its finite-difference slope stay finite on ``[lo, hi]``."""
        x = np.linspace(lo, hi, n)
        for _, name in self.extra:
            y = MAPS[name](x)
            if not (np.all(np.isfinite(y)) and np.all(np.isfinite(np.gradient(y, x)))):
                return False
        return True


OBSERVABLE_SETS = {
    "pressure": ObservableSet("pressure", ((0, "neg_x_exp"), (0, "exp_sin"))),
    "full": ObservableSet(
        "full", ((0, "neg_x_exp"), (0, "exp_sin"), (1, "neg_x_exp"), (1, "exp_sin"))
    ),
    "state": ObservableSet("state", ()),
}
ALIASES = {"v5a": "pressure", "c4": "full"}
DEFAULT_OBSERVABLES = "pressure"


def get_observables(name: str) -> ObservableSet:
    key = ALIASES.get(name, name)
    try:
        return OBSERVABLE_SETS[key]
    except KeyError:
        raise SchemaMismatch(f"unknown observable set {name!r}") from None


def lift(obs: ObservableSet, x) -> np.ndarray:
    """Lift a normalized state pair (or an array of pairs) into ``N`` coordinates."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    cols = [x2[:, 0], x2[:, 1]]
    for comp, name in obs.extra:
        cols.append(MAPS[name](x2[:, comp]))
    out = np.column_stack(cols)
    return out[0] if single else out


def extract(psi) -> np.ndarray:
    """Apply ``C = [I_2 0]``."""
    psi = np.asarray(psi)
    return psi[..., :2].copy()


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class DelayConfig:
    dx: int = 3
    du: int = 2

    def __post_init__(self):
        if self.dx < 1 or self.du < 0:
            raise DimensionMismatch("need dx >= 1 and du >= 0")

    @property
    def start(self) -> int:
        return max(self.dx, self.du)


@dataclass(frozen=True)
class Regression:
    """Stacked targets ``Y`` and regressors ``Z`` (one row per predicted time)."""

    Y: np.ndarray
    Z: np.ndarray
    times: np.ndarray
    split: int
    N: int
    delays: DelayConfig

    @property
    def train(self):
        return self.Y[: self.split], self.Z[: self.split]

    @property
    def test(self):
        return self.Y[self.split:], self.Z[self.split:]


def regressor_row(psi_hist, u_hist) -> np.ndarray:
    """Concatenate ``psi[t-1..t-Dx]`` and ``u[t..t-Du]`` (both passed newest first)."""
    return np.concatenate([np.ravel(psi_hist), np.ravel(u_hist)])


def build_regression(
    snapshots: SnapshotSet,
    obs: ObservableSet,
    delays: DelayConfig,
    train_fraction: float = 0.8,
) -> Regression:
    """Build the delay-embedded least-squares problem.

    Row ``t`` of ``Y`` is ``psi(x[t])``; the matching row of ``Z`` is
    ``[psi(x[t-1]) .. psi(x[t-Dx]), u[t] .. u[t-Du]]``. Rows whose target time
    lies below ``train_fraction * count`` form the training part.
    """
    count = len(snapshots)
    N = obs.N
    start = delays.start
    if count - start < 1 or count <= delays.dx + delays.du + N:
        raise InsufficientData(
            f"{count} snapshots cannot support Dx={delays.dx}, Du={delays.du}, N={N}"
        )
    psi = lift(obs, snapshots.x)
    u = snapshots.u
    t = np.arange(start, count)
    Y = psi[t]
    blocks = [psi[t - i] for i in range(1, delays.dx + 1)]
    blocks += [u[t - i] for i in range(0, delays.du + 1)]
    Z = np.hstack(blocks)
    cut = int(round(train_fraction * count))
    split = int(np.searchsorted(t, cut))
    return Regression(Y, Z, t, split, N, delays)


# ---------------------------------------------------------------------------
# stability


def companion_matrix(Kx) -> np.ndarray:
    """Block companion matrix with ``Kx`` in the top block row and identity shifts below."""
    Kx = [np.asarray(k, dtype=float) for k in Kx]
    N = Kx[0].shape[0]
    D = len(Kx)
    A = np.zeros((N * D, N * D))
    A[:N, :] = np.hstack(Kx)
    if D > 1:
        A[N:, : N * (D - 1)] = np.eye(N * (D - 1))
    return A


def spectral_radius(A) -> float:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch("spectral radius needs a square matrix")
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(linalg.eigvals(A))))


def norm_budget(blocks) -> float:
    """Sum of the largest singular values of the blocks."""
    return float(np.linalg.norm(np.asarray(blocks, dtype=float), 2, axis=(1, 2)).sum())


def _clip(block, limit):
    U, s, Vt = np.linalg.svd(block, full_matrices=False)
    return (U * np.minimum(s, limit)) @ Vt


def _thresholds(S, mu):
    """Per-row ``tau >= 0`` solving ``sum_j (S[i, j] - tau)_+ = mu`` (0 if the row sum is below ``mu``).

    ``S`` holds singular values sorted in descending order along each row.
    ``mu`` may be a vector, in which case the result has shape ``(len(mu), rows)``.
    """
    mu = np.asarray(mu, dtype=float)[..., None, None]
    csum = np.cumsum(S, axis=1)
    k = np.arange(1, S.shape[1] + 1)
    cand = (csum - mu) / k
    valid = S * k >= csum - mu
    rho = S.shape[1] - 1 - np.argmax(valid[..., ::-1], axis=-1)
    tau = np.take_along_axis(cand, rho[..., None], axis=-1)[..., 0]
    return np.maximum(tau, 0.0)


def _sum_taus(S, radius):
    """Clipping levels of the Euclidean projection onto ``{sum_i max(S[i]) <= radius}``.

    The total ``sum_i tau_i(mu)`` is piecewise linear in the multiplier ``mu``,
    so the root is found exactly by interpolating between breakpoints.
    """
    csum = np.cumsum(S, axis=1)
    k = np.arange(1, S.shape[1] + 1)
    bps = np.concatenate([(csum - S * k).ravel(), csum[:, -1], [0.0]])
    bps = np.unique(bps[bps >= 0])
    g = _thresholds(S, bps).sum(axis=1)
    j = int(np.searchsorted(-g, -radius, side="left"))
    if j == 0:
        return S[:, 0].copy()
    a, b = bps[j - 1], bps[j]
    ga, gb = g[j - 1], g[j]
    mu = a if ga == gb else a + (ga - radius) * (b - a) / (ga - gb)
    taus = _thresholds(S, mu)
    if taus.sum() > radius:
        taus *= radius / taus.sum()
    return taus


def _project_sum(blocks, radius):
    B = np.asarray(blocks, dtype=float)
    U, S, Vt = np.linalg.svd(B, full_matrices=False)
    if S[:, 0].sum() <= radius:
        return [b.copy() for b in B]
    taus = _sum_taus(S, radius)
    P = (U * np.minimum(S, taus[:, None])[:, None, :]) @ Vt
    return list(P)


def project_stable(blocks, epsilon: float = DEFAULT_EPSILON, mode: str = "sum"):
    """Map state operators into ``{sum_i sigma_max(Kx[i]) <= 1 - epsilon}``.

    ``sum`` is the Euclidean projection onto that set, ``per_block`` clips every
    block at ``(1 - epsilon) / Dx`` and ``scaled`` shrinks all blocks by one
    common factor when the budget is exceeded.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    blocks = [np.asarray(b, dtype=float) for b in blocks]
    radius = 1.0 - epsilon
    if mode == "per_block":
        limit = radius / len(blocks)
        return [_clip(b, limit) if np.linalg.norm(b, 2) > limit else b.copy() for b in blocks]
    if mode == "scaled":
        s = norm_budget(blocks)
        if s <= radius:
            return [b.copy() for b in blocks]
        return [b * (radius / s) for b in blocks]
    if mode == "sum":
        return _project_sum(blocks, radius)
    raise ValueError(f"unknown stability mode {mode!r}")


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class KoopmanModel:
    Kx: tuple
    Ku: tuple
    observables: str
    dt: float
    p_base: float = 5.0e6
    m_base: float = 10.0
    pipeline_id: str = "pipe"
    stability: dict = field(default_factory=lambda: {"enabled": False})
    stats: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        Kx = tuple(np.array(k, dtype=float) for k in self.Kx)
        Ku = tuple(np.array(k, dtype=float) for k in self.Ku)
        if not Kx:
            raise DimensionMismatch("model needs at least one state operator")
        N = Kx[0].shape[0]
        if any(k.shape != (N, N) for k in Kx) or any(k.shape != (N, 2) for k in Ku):
            raise DimensionMismatch("operator shapes are inconsistent")
        if get_observables(self.observables).N != N:
            raise DimensionMismatch(
                f"observable set {self.observables!r} has N={get_observables(self.observables).N}, "
                f"operators have N={N}"
            )
        for k in Kx + Ku:
            k.setflags(write=False)
        object.__setattr__(self, "Kx", Kx)
        object.__setattr__(self, "Ku", Ku)

    @property
    def N(self) -> int:
        return self.Kx[0].shape[0]

    @property
    def delays(self) -> DelayConfig:
        return DelayConfig(len(self.Kx), len(self.Ku) - 1)

    @property
    def obs(self) -> ObservableSet:
        return get_observables(self.observables)

    def weights(self) -> np.ndarray:
        """Stacked coefficient matrix ``W`` with ``Y = Z W``."""
        return np.vstack([k.T for k in self.Kx] + [k.T for k in self.Ku])

    def companion(self) -> np.ndarray:
        return companion_matrix(self.Kx)

    def __eq__(self, other):
        if not isinstance(other, KoopmanModel):
            return NotImplemented
        return (
            self.observables == other.observables
            and self.dt == other.dt
            and self.p_base == other.p_base
            and self.m_base == other.m_base
            and self.pipeline_id == other.pipeline_id
            and self.stability == other.stability
            and len(self.Kx) == len(other.Kx)
            and len(self.Ku) == len(other.Ku)
            and all(np.array_equal(a, b) for a, b in zip(self.Kx, other.Kx))
            and all(np.array_equal(a, b) for a, b in zip(self.Ku, other.Ku))
        )

    __hash__ = None


def _split_weights(W, N, delays):
    Kx = [W[i * N:(i + 1) * N].T.copy() for i in range(delays.dx)]
    off = delays.dx * N
    Ku = [W[off + 2 * i: off + 2 * i + 2].T.copy() for i in range(delays.du + 1)]
    return Kx, Ku


def _lstsq(Y, Z, ridge=RIDGE):
    n = Z.shape[1]
    Za = np.vstack([Z, math.sqrt(ridge) * np.eye(n)])
    Ya = np.vstack([Y, np.zeros((n, Y.shape[1]))])
    W, *_ = linalg.lstsq(Za, Ya, lapack_driver="gelsd")
    return W


def _objective(Y, Z, W, ridge=RIDGE):
    R = Y - Z @ W
    return 0.5 * (float(np.sum(R * R)) + ridge * float(np.sum(W * W)))


def _polish_inputs(Y, Z, Wx, nx):
    """Least-squares input operators given fixed state operators."""
    W = np.empty((Z.shape[1], Y.shape[1]))
    W[:nx] = Wx
    W[nx:] = _lstsq(Y - Z[:, :nx] @ Wx, Z[:, nx:])
    return W


def _lmi_basis(N: int, with_t: bool) -> np.ndarray:
    """Basis of ``[[t I, B], [B^T, t I]]`` over the entries of ``B`` (row-major), then ``t``."""
    E = np.zeros((N * N + with_t, 2 * N, 2 * N))
    for a in range(N):
        for b in range(N):
            E[a * N + b, a, N + b] = E[a * N + b, N + b, a] = 1.0
    if with_t:
        E[-1] = np.eye(2 * N)
    return E


def _reduce(Y, Z, nx):
    """Eliminate the input rows of ``W`` from the ridge least-squares objective.

    Returns ``(c, A, R)`` with ``min_{W_u} f(W) = c + ||A - R W_x||^2 / 2``. A QR
    factorization keeps the small objective accurate where the normal
    equations would cancel.
    """
    n = Z.shape[1]
    nu = n - nx
    Za = np.vstack([Z, math.sqrt(RIDGE) * np.eye(n)])
    Ya = np.vstack([Y, np.zeros((n, Y.shape[1]))])
    Q, R = np.linalg.qr(np.hstack([Za[:, nx:], Za[:, :nx]]))
    Yt = Q.T @ Ya
    c = 0.5 * float(np.sum((Ya - Q @ Yt) ** 2))
    return c, Yt[nu:], R[nu:, nu:]


def _constrained_fit(Y, Z, W0, N, delays, epsilon, mode, tol, max_newton):
    """Stability-constrained least squares by a log-det barrier method.

    Each block ``B_i`` of the state rows gets the LMI ``[[t_i I, B_i], [B_i^T, t_i I]] >= 0``
    with ``sum t_i <= 1 - epsilon`` (``per_block``: ``t_i = (1 - epsilon) / Dx``
    fixed). On the central path the suboptimality is at most ``m / tau``
    (``m`` the barrier degree), so the loop stops once that bound falls below
    ``tol`` times the objective. Newton steps are insensitive to the near
    collinearity of delay-embedded regressors, which stalls first-order
    methods here.

    Returns the weights, the Newton step count and the certified bound.
    """
    D = delays.dx
    nx = D * N
    nw = nx * N
    # uniform scaling is not a Euclidean projection, so the "scaled" set is
    # optimized over directly
    with_t = mode != "per_block"
    radius = 1.0 - epsilon
    c, A, R = _reduce(Y, Z, nx)
    E = _lmi_basis(N, with_t)
    # x = [vec(W_x) column-major, t]; block i uses rows iN..iN+N-1 of W_x
    idx = []
    for i in range(D):
        cols = [b * nx + i * N + a for a in range(N) for b in range(N)]
        idx.append(np.array(cols + ([nw + i] if with_t else []), dtype=int))
    nvar = nw + (D if with_t else 0)
    m = 2 * N * D + with_t
    Hf = np.zeros((nvar, nvar))
    Hf[:nw, :nw] = np.kron(np.eye(N), R.T @ R)

    def unpack(x):
        return x[:nw].reshape(N, nx).T

    def lmis(x):
        Wx = unpack(x)
        eye = np.eye(N)
        for i in range(D):
            t = x[nw + i] if with_t else radius / D
            B = Wx[i * N:(i + 1) * N]
            yield np.block([[t * eye, B], [B.T, t * eye]])

    def fval(x):
        r = A - R @ unpack(x)
        return 0.5 * float(np.sum(r * r))

    def barrier(x):
        val = 0.0
        for M in lmis(x):
            try:
                val -= 2.0 * float(np.sum(np.log(np.diag(np.linalg.cholesky(M)))))
            except np.linalg.LinAlgError:
                return math.inf
        if with_t:
            slack = radius - x[nw:].sum()
            if slack <= 0:
                return math.inf
            val -= math.log(slack)
        return val

    def newton_system(x, tau):
        g = np.zeros(nvar)
        g[:nw] = (-(R.T @ (A - R @ unpack(x)))).T.ravel()
        g *= tau
        H = tau * Hf
        for i, M in enumerate(lmis(x)):
            SE = np.einsum("ab,kbc->kac", np.linalg.inv(M), E)
            g[idx[i]] -= np.einsum("kaa->k", SE)
            H[np.ix_(idx[i], idx[i])] += np.einsum("kab,lba->kl", SE, SE)
        if with_t:
            slack = radius - x[nw:].sum()
            g[nw:] += 1.0 / slack
            H[nw:, nw:] += 1.0 / slack**2
        return g, H

    # strictly feasible start: the unconstrained fit shrunk well inside the set
    Wx0 = W0[:nx]
    if with_t:
        Wx0 = Wx0 * (0.4 * radius / max(norm_budget(_blocks(Wx0, N, D)), 1e-300))
    else:
        Wx0 = Wx0 * (0.5 * radius / D / max(max(np.linalg.norm(b, 2) for b in _blocks(Wx0, N, D)), 1e-300))
    x = np.zeros(nvar)
    x[:nw] = Wx0.T.ravel()
    if with_t:
        sig = np.array([np.linalg.norm(b, 2) for b in _blocks(Wx0, N, D)])
        x[nw:] = sig + (radius - sig.sum()) / (2 * D)
    tau = m / max(fval(x), 1e-300)
    steps = 0
    while True:
        while steps < max_newton:
            g, H = newton_system(x, tau)
            try:
                # late barrier Hessians are ill-conditioned by design; the decrement check guards accuracy
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", linalg.LinAlgWarning)
                    dx = -linalg.solve(H, g, assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                dx = -np.linalg.lstsq(H, g, rcond=None)[0]
            steps += 1
            dec = -float(g @ dx)
            if dec <= BARRIER_CENTERING:
                break
            val = tau * fval(x) + barrier(x)
            a = 1.0
            while a > 1e-12:
                xn = x + a * dx
                vn = tau * fval(xn) + barrier(xn)
                # the slack absorbs rounding once tau * f is large
                if vn <= val - 0.25 * a * dec + 1e-12 * abs(val):
                    break
                a *= 0.5
            else:
                break
            x = xn
        bound = m / tau
        obj = c + fval(x)
        if bound <= tol * obj:
            return _polish_inputs(Y, Z, unpack(x), nx), steps, bound / obj
        if steps >= max_newton:
            raise NonConvergence(
                f"barrier method used {max_newton} Newton steps; certified gap {bound / obj:.2e} > {tol:g}")
        tau *= BARRIER_MU


def _blocks(Wx, N, D):
    return [Wx[i * N:(i + 1) * N] for i in range(D)]


def edmd_fit(
    reg: Regression,
    stability: bool = True,
    epsilon: float = DEFAULT_EPSILON,
    mode: str = "sum",
    observables: str = DEFAULT_OBSERVABLES,
    dt: float = 900.0,
    p_base: float = 5.0e6,
    m_base: float = 10.0,
    pipeline_id: str = "pipe",
    tol: float = FIT_TOL,
    max_iter: int = FIT_MAX_NEWTON,
    use_all_rows: bool = False,
) -> KoopmanModel:
    """Fit the operators by (optionally stability-constrained) least squares.

    Only the training rows of ``reg`` are used unless ``use_all_rows``.
    """
    Y, Z = (reg.Y, reg.Z) if use_all_rows else reg.train
    if Z.shape[0] < Z.shape[1]:
        raise RankDeficient(f"{Z.shape[0]} rows for {Z.shape[1]} unknowns")
    if get_observables(observables).N != reg.N:
        raise DimensionMismatch("observable set does not match the regression")
    W = _lstsq(Y, Z)
    steps, gap = 0, 0.0
    if stability:
        if mode not in STABILITY_MODES:
            raise ValueError(f"unknown stability mode {mode!r}")
        Kx, _ = _split_weights(W, reg.N, reg.delays)
        radius = 1 - epsilon
        inside = (max(np.linalg.norm(k, 2) for k in Kx) <= radius / len(Kx) if mode == "per_block"
                  else norm_budget(Kx) <= radius)
        if not inside:
            W, steps, gap = _constrained_fit(Y, Z, W, reg.N, reg.delays, epsilon, mode, tol, max_iter)
    Kx, Ku = _split_weights(W, reg.N, reg.delays)
    rho = spectral_radius(companion_matrix(Kx))
    stab = {
        "enabled": bool(stability),
        "epsilon": float(epsilon) if stability else None,
        "mode": mode if stability else None,
        "certified_spectral_radius": rho,
    }
    if stability and not rho < 1:
        raise NonConvergence(f"fitted model has spectral radius {rho:.6f} >= 1")
    stats = {"train_objective": _objective(Y, Z, W), "newton_steps": steps, "certified_gap": gap,
             "norm_budget": norm_budget(Kx)}
    return KoopmanModel(tuple(Kx), tuple(Ku), observables, float(dt), p_base, m_base, pipeline_id, stab, stats)


def train(
    snapshots: SnapshotSet,
    delays: DelayConfig = DelayConfig(),
    observables: str = DEFAULT_OBSERVABLES,
    stability: bool = True,
    epsilon: float = DEFAULT_EPSILON,
    mode: str = "sum",
    train_fraction: float = 0.8,
):
    """Build the regression from snapshots and fit; returns ``(model, regression)``."""
    obs = get_observables(observables)
    reg = build_regression(snapshots, obs, delays, train_fraction)
    model = edmd_fit(reg, stability, epsilon, mode, obs.name, snapshots.dt, snapshots.p_base,
                     snapshots.m_base, snapshots.pipeline_id)
    return model, reg


def training_residual(model: KoopmanModel, reg: Regression) -> float:
    Y, Z = reg.train
    R = Y - Z @ model.weights()
    return float(np.sum(R * R))


def one_step_errors(model: KoopmanModel, reg: Regression, part: str = "test") -> np.ndarray:
    """Normalized one-step prediction errors of ``(p_out, m_out)``, shape ``(rows, 2)``."""
    Y, Z = reg.test if part == "test" else reg.train if part == "train" else (reg.Y, reg.Z)
    return (Z @ model.weights() - Y)[:, :2]


def predict(model: KoopmanModel, psi_hist, u_hist, inputs) -> np.ndarray:
    """Roll the model forward.

    Parameters
    ----------
    psi_hist : array (Dx, N)
        Past lifted states, oldest first; the last row is ``psi[t-1]``.
    u_hist : array (Du, 2)
        Past inputs, oldest first; the last row is ``u[t-1]``.
    inputs : array (T, 2)
        Inputs ``u[t], u[t+1], ...``.

    Returns
    -------
    array (T, N)
        Predicted lifted states.
    """
    dx, du = model.delays.dx, model.delays.du
    psi_hist = np.asarray(psi_hist, dtype=float).reshape(dx, model.N)
    u_hist = np.asarray(u_hist, dtype=float).reshape(du, 2)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
    psi = [row for row in psi_hist]
    us = [row for row in u_hist]
    out = np.empty((inputs.shape[0], model.N))
    for t, u in enumerate(inputs):
        us.append(u)
        nxt = np.zeros(model.N)
        for i, K in enumerate(model.Kx, start=1):
            nxt += K @ psi[-i]
        for i, K in enumerate(model.Ku):
            nxt += K @ us[-1 - i]
        psi.append(nxt)
        out[t] = nxt
    return out


def denormalize_outputs(model: KoopmanModel, psi) -> np.ndarray:
    """Physical ``(p_out [Pa], m_out [kg/s])`` from lifted states."""
    return extract(psi) * np.array([model.p_base, model.m_base])


# ---------------------------------------------------------------------------
# persistence


def model_to_dict(model: KoopmanModel) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "pipeline_id": model.pipeline_id,
        "observable_set": model.observables,
        "D_x": model.delays.dx,
        "D_u": model.delays.du,
        "dt_seconds": model.dt,
        "base_pressure": model.p_base,
        "base_mfr": model.m_base,
        "Kx": [k.tolist() for k in model.Kx],
        "Ku": [k.tolist() for k in model.Ku],
        "stability": dict(model.stability),
    }


_REQUIRED = ("version", "pipeline_id", "observable_set", "D_x", "D_u", "dt_seconds",
             "base_pressure", "base_mfr", "Kx", "Ku", "stability")


def model_from_dict(data: dict) -> KoopmanModel:
    if "version" in data and data["version"] != SCHEMA_VERSION:
        raise VersionError(SCHEMA_VERSION, data["version"])
    missing = [k for k in _REQUIRED if k not in data]
    if missing:
        raise SchemaMismatch(f"model file lacks fields {missing}")
    try:
        model = KoopmanModel(
            tuple(np.array(k, dtype=float) for k in data["Kx"]),
            tuple(np.array(k, dtype=float) for k in data["Ku"]),
            data["observable_set"],
            float(data["dt_seconds"]),
            float(data["base_pressure"]),
            float(data["base_mfr"]),
            str(data["pipeline_id"]),
            dict(data["stability"]),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaMismatch(f"malformed model operators: {exc}") from exc
    if model.delays.dx != data["D_x"] or model.delays.du != data["D_u"]:
        raise SchemaMismatch("D_x/D_u disagree with the stored operators")
    return model


def save_model(model: KoopmanModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # json writes floats with repr(), which round-trips exactly
    path.write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> KoopmanModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise SchemaMismatch(f"{path}: expected a JSON object")
    return model_from_dict(data)
