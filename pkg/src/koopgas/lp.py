"""Sparse linear programs: assembly helper, HiGHS solve and certificates."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import Infeasible, NonConvergence, Unbounded

FEAS_TOL = 1e-6
GAP_TOL = 1e-6


@dataclass(frozen=True)
class LinearProgram:
    """``min c^T y  s.t.  A_eq y = b_eq,  A_ub y <= b_ub,  lb <= y <= ub``."""

    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    blocks: dict = field(default_factory=dict)
    eq_labels: tuple = ()
    ub_labels: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_eq(self) -> int:
        return self.b_eq.size

    @property
    def n_ub(self) -> int:
        return self.b_ub.size

    def residuals(self, y) -> dict:
        """Scaled primal violations of a candidate point."""
        y = np.asarray(y, dtype=float)
        out = {"eq": 0.0, "ub": 0.0, "bounds": 0.0}
        if self.n_eq:
            r = np.abs(self.A_eq @ y - self.b_eq) / (1.0 + np.abs(self.b_eq))
            out["eq"] = float(r.max())
        if self.n_ub:
            r = np.maximum(self.A_ub @ y - self.b_ub, 0.0) / (1.0 + np.abs(self.b_ub))
            out["ub"] = float(r.max())
        flo, fhi = np.isfinite(self.lb), np.isfinite(self.ub)
        lo = (self.lb[flo] - y[flo]) / (1.0 + np.abs(self.lb[flo]))
        hi = (y[fhi] - self.ub[fhi]) / (1.0 + np.abs(self.ub[fhi]))
        out["bounds"] = float(max(0.0, lo.max(initial=0.0), hi.max(initial=0.0)))
        out["max"] = max(out.values())
        return out


@dataclass(frozen=True)
class LPResult:
    x: np.ndarray
    objective: float
    dual_objective: float
    gap: float
    residual: float
    solve_time: float
    iterations: int
    eq_duals: np.ndarray
    ub_duals: np.ndarray
    method: str = "highs"


class LPBuilder:
    """Accumulates named variable blocks and labelled constraint rows."""

    def __init__(self):
        self.n = 0
        self._lb, self._ub, self._c = [], [], []
        self.blocks = {}
        self._rows = {"eq": ([], [], [], [], []), "ub": ([], [], [], [], [])}
        self._nrows = {"eq": 0, "ub": 0}

    def var(self, name, shape, lb=-np.inf, ub=np.inf, cost=0.0) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self.n += size
        self._lb.append(np.broadcast_to(np.asarray(lb, dtype=float), shape).ravel())
        self._ub.append(np.broadcast_to(np.asarray(ub, dtype=float), shape).ravel())
        self._c.append(np.broadcast_to(np.asarray(cost, dtype=float), shape).ravel())
        self.blocks[name] = idx
        return idx

    def _add(self, kind, cols, vals, rhs, label):
        rows, cs, vs, rhss, labels = self._rows[kind]
        cols = np.atleast_1d(np.asarray(cols, dtype=int)).ravel()
        vals = np.broadcast_to(np.asarray(vals, dtype=float), cols.shape).ravel()
        rows.append(np.full(cols.size, self._nrows[kind]))
        cs.append(cols)
        vs.append(vals)
        rhss.append(float(rhs))
        labels.append(label)
        self._nrows[kind] += 1

    def eq(self, cols, vals, rhs, label=""):
        self._add("eq", cols, vals, rhs, label)

    def le(self, cols, vals, rhs, label=""):
        self._add("ub", cols, vals, rhs, label)

    def build(self, **meta) -> LinearProgram:
        mats = {}
        for kind in ("eq", "ub"):
            rows, cs, vs, rhss, labels = self._rows[kind]
            m = self._nrows[kind]
            if m:
                A = sp.csr_matrix(
                    (np.concatenate(vs), (np.concatenate(rows), np.concatenate(cs))), shape=(m, self.n)
                )
            else:
                A = sp.csr_matrix((0, self.n))
            mats[kind] = (A, np.array(rhss, dtype=float), tuple(labels))
        cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
        return LinearProgram(
            cat(self._c), mats["eq"][0], mats["eq"][1], mats["ub"][0], mats["ub"][1],
            cat(self._lb), cat(self._ub), dict(self.blocks), mats["eq"][2], mats["ub"][2], meta,
        )


def _bounds(lp):
    lb = np.where(np.isfinite(lp.lb), lp.lb, None)
    ub = np.where(np.isfinite(lp.ub), lp.ub, None)
    return list(zip(lb, ub))


METHODS = ("highs", "highs-ipm", "highs-ds")


def _linprog(c, A_ub, b_ub, A_eq, b_eq, bounds, method="highs"):
    return linprog(
        c,
        A_ub=A_ub if A_ub.shape[0] else None,
        b_ub=b_ub if A_ub.shape[0] else None,
        A_eq=A_eq if A_eq.shape[0] else None,
        b_eq=b_eq if A_eq.shape[0] else None,
        bounds=bounds,
        method=method,
    )


def _certify(lp, res):
    x = np.asarray(res.x, dtype=float)
    y_eq = np.asarray(res.eqlin.marginals) if lp.n_eq else np.zeros(0)
    y_ub = np.asarray(res.ineqlin.marginals) if lp.n_ub else np.zeros(0)
    mu_lo = np.asarray(res.lower.marginals)
    mu_hi = np.asarray(res.upper.marginals)
    dual = float(lp.b_eq @ y_eq + lp.b_ub @ y_ub)
    dual += float(np.sum(np.where(np.isfinite(lp.lb), lp.lb, 0.0) * mu_lo))
    dual += float(np.sum(np.where(np.isfinite(lp.ub), lp.ub, 0.0) * mu_hi))
    primal = float(lp.c @ x)
    gap = abs(primal - dual) / max(1.0, abs(primal))
    return x, primal, dual, gap, lp.residuals(x)["max"], y_eq, y_ub


def solve_lp(lp: LinearProgram) -> LPResult:
    """Solve with HiGHS and certify the result.

    The solution is accepted once its scaled primal residual is at most
    ``FEAS_TOL`` and the duality gap of the reported duals at most ``GAP_TOL``;
    otherwise the next HiGHS method is tried.

    Raises
    ------
    Infeasible
        With the label of the row needing the largest relaxation.
    Unbounded
    NonConvergence
        If no method produces a certified solution.
    """
    t0 = time.perf_counter()
    bounds = _bounds(lp)
    failures = []
    for method in METHODS:
        res = _linprog(lp.c, lp.A_ub, lp.b_ub, lp.A_eq, lp.b_eq, bounds, method)
        if res.status == 2:
            viol, label = max_violation(lp)
            raise Infeasible(f"LP infeasible; largest violation {viol:.4g} at row {label!r}", viol, label)
        if res.status == 3:
            raise Unbounded("LP objective is unbounded below")
        if res.status != 0:
            failures.append(f"{method}: {res.message}")
            continue
        x, primal, dual, gap, resid, y_eq, y_ub = _certify(lp, res)
        if resid <= FEAS_TOL and gap <= GAP_TOL:
            elapsed = time.perf_counter() - t0
            return LPResult(x, primal, dual, gap, resid, elapsed, int(getattr(res, "nit", 0)), y_eq, y_ub,
                            method)
        failures.append(f"{method}: residual {resid:.2e}, gap {gap:.2e}")
    raise NonConvergence("no certified LP solution; " + "; ".join(failures))


def max_violation(lp: LinearProgram):
    """Relax every row with nonnegative slacks and report the largest one needed."""
    n, m_eq, m_ub = lp.n_vars, lp.n_eq, lp.n_ub
    A_eq = sp.hstack([lp.A_eq, sp.eye(m_eq), -sp.eye(m_eq), sp.csr_matrix((m_eq, m_ub))]).tocsr()
    A_ub = sp.hstack([lp.A_ub, sp.csr_matrix((m_ub, 2 * m_eq)), -sp.eye(m_ub)]).tocsr()
    c = np.concatenate([np.zeros(n), np.ones(2 * m_eq + m_ub)])
    bounds = _bounds(lp) + [(0, None)] * (2 * m_eq + m_ub)
    res = _linprog(c, A_ub, lp.b_ub, A_eq, lp.b_eq, bounds)
    if res.status != 0:
        return float("inf"), "variable bounds"
    s = res.x[n:]
    eq_s = s[:m_eq] + s[m_eq:2 * m_eq]
    ub_s = s[2 * m_eq:]
    labels = list(lp.eq_labels) + list(lp.ub_labels)
    both = np.concatenate([eq_s, ub_s])
    k = int(np.argmax(both))
    return float(both[k]), labels[k] if labels else str(k)
