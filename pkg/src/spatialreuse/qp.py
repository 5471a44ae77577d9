"""Convex QP front end (Clarabel backend plus active-set polish) and the
capped-simplex projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp


class QpError(RuntimeError):
    pass


class QpInfeasible(QpError):
    pass


class QpUnbounded(QpError):
    pass


@dataclass
class QpProblem:
    """``minimize 1/2 x'Px + c'x  s.t.  A x = b,  G x <= h,  x >= lb``.

    ``P`` may be a dense matrix, a 1-D diagonal, or None (linear objective).
    ``lb`` entries of ``-inf`` leave a variable free below.
    """

    c: np.ndarray
    P: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    lb: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.P is None:
            self.P = np.zeros((n, n))
        else:
            P = np.asarray(self.P, dtype=float)
            self.P = np.diag(P) if P.ndim == 1 else P
        if self.P.shape != (n, n):
            raise ValueError("P has the wrong shape")
        self.A = np.zeros((0, n)) if self.A is None else np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).ravel()
        self.G = np.zeros((0, n)) if self.G is None else np.asarray(self.G, dtype=float).reshape(-1, n)
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, dtype=float).ravel()
        self.lb = np.full(n, -np.inf) if self.lb is None else np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        if len(self.b) != len(self.A) or len(self.h) != len(self.G):
            raise ValueError("constraint right-hand sides do not match")

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.c @ x)

    def residuals(self, x) -> dict:
        eq = float(np.max(np.abs(self.A @ x - self.b), initial=0.0))
        ineq = float(np.max(self.G @ x - self.h, initial=0.0))
        bound = float(np.max(self.lb - x, initial=0.0))
        return {"equality": eq, "inequality": max(ineq, 0.0), "bound": max(bound, 0.0)}


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    iterations: int
    eq_dual: np.ndarray
    ineq_dual: np.ndarray
    kkt: dict = field(default_factory=dict)


def _stack_inequalities(prob: QpProblem):
    finite = np.isfinite(prob.lb)
    idx = np.flatnonzero(finite)
    B = np.zeros((idx.size, prob.n))
    B[np.arange(idx.size), idx] = -1.0
    G = np.vstack([prob.G, B])
    h = np.concatenate([prob.h, -prob.lb[idx]])
    return G, h


def _settings(tol, max_iter):
    st = clarabel.DefaultSettings()
    st.verbose = False
    st.max_iter = max_iter
    st.tol_gap_abs = tol
    st.tol_gap_rel = tol
    st.tol_feas = tol
    st.tol_ktratio = 1e-8
    st.equilibrate_enable = True
    return st


def solve_qp(prob: QpProblem, tol: float = 1e-9, max_iter: int = 100, polish: bool = True) -> QpSolution:
    """Solve a convex QP with the Clarabel interior-point solver.

    Variable bounds are folded into the inequality block. After the
    interior solve the active set read off the duals is polished with one
    exact KKT solve, kept only when it lowers the KKT error. Raises
    :class:`QpInfeasible` or :class:`QpUnbounded` on certificates.
    """
    n = prob.n
    if np.any(prob.P.diagonal() < -1e-12):
        raise ValueError("quadratic form is not positive semidefinite")
    G0, h0 = _stack_inequalities(prob)
    me, mi = len(prob.A), len(G0)
    A = sp.csc_matrix(np.vstack([prob.A, G0])) if me + mi else sp.csc_matrix((0, n))
    b = np.concatenate([prob.b, h0])
    P = sp.csc_matrix(np.triu(prob.P))
    cones = []
    if me:
        cones.append(clarabel.ZeroConeT(me))
    if mi:
        cones.append(clarabel.NonnegativeConeT(mi))
    solver = clarabel.DefaultSolver(P, prob.c, A, b, cones, _settings(tol, max_iter))
    res = solver.solve()
    status = str(res.status)
    if "PrimalInfeasible" in status:
        raise QpInfeasible(f"no feasible point ({status})")
    if "DualInfeasible" in status:
        raise QpUnbounded(f"objective unbounded below ({status})")
    x = np.asarray(res.x, dtype=float)
    z = np.asarray(res.z, dtype=float)
    if not np.all(np.isfinite(x)):
        raise QpError(f"solver failed ({status})")
    y, zi = z[:me], z[me:]
    converged = status in ("Solved", "AlmostSolved")
    if polish and mi:
        slack = h0 - G0 @ x
        x, y, zi = _polish(prob, G0, h0, x, y, zi, zi > slack)

    r = prob.residuals(x)
    stat = prob.P @ x + prob.c + prob.A.T @ y + G0.T @ zi
    r["stationarity"] = float(np.max(np.abs(stat), initial=0.0))
    r["complementarity"] = float(np.max(np.abs(zi * (h0 - G0 @ x)), initial=0.0))
    r["converged"] = converged
    if not converged and max(r["equality"], r["inequality"], r["bound"]) > 1e3 * tol:
        raise QpError(f"solver stopped with status {status}")
    return QpSolution(x, prob.objective(x), int(res.iterations), y, zi[: len(prob.G)], r)


def _kkt_error(prob, G0, h0, x, y, z):
    stat = prob.P @ x + prob.c + prob.A.T @ y + G0.T @ z
    scale = 1 + np.max(np.abs(prob.c), initial=0)
    feas = max(np.max(np.abs(prob.A @ x - prob.b), initial=0), np.max(G0 @ x - h0, initial=0))
    return max(np.max(np.abs(stat), initial=0) / scale, feas, np.max(-z, initial=0) / scale)


def _polish(prob, G0, h0, x, y, z, active_mask):
    n = prob.n
    active = np.flatnonzero(active_mask)
    Ga = G0[active]
    me, ma = len(prob.A), len(active)
    K = np.block([
        [prob.P, prob.A.T, Ga.T],
        [prob.A, np.zeros((me, me)), np.zeros((me, ma))],
        [Ga, np.zeros((ma, me)), np.zeros((ma, ma))],
    ])
    rhs = np.concatenate([-prob.c, prob.b, h0[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return x, y, z
    xp = sol[:n]
    yp = sol[n:n + me]
    zp = np.zeros_like(z)
    zp[active] = sol[n + me:]
    if not np.all(np.isfinite(sol)):
        return x, y, z
    if _kkt_error(prob, G0, h0, xp, yp, zp) < _kkt_error(prob, G0, h0, x, y, z):
        return xp, yp, zp
    return x, y, z


def project_capped_simplex(point, cap: float) -> np.ndarray:
    """Euclidean projection onto ``{v >= 0, sum(v) <= cap}``."""
    v, _ = capped_simplex_with_level(point, cap)
    return v


def capped_simplex_with_level(point, cap: float):
    """Projection plus the water level ``tau >= 0`` subtracted from ``point``."""
    if cap < 0:
        raise ValueError("cap must be non-negative")
    point = np.asarray(point, dtype=float)
    clamped = np.maximum(point, 0.0)
    if clamped.sum() <= cap:
        return clamped, 0.0
    if cap == 0:
        return np.zeros_like(point), float(point.max())
    u = np.sort(point)[::-1]
    css = np.cumsum(u) - cap
    ks = np.arange(1, u.size + 1)
    cond = u - css / ks > 0
    cond[0] = True  # holds exactly; rounding can lose it for tiny caps
    k = int(ks[cond][-1])
    tau = css[k - 1] / k
    return np.maximum(point - tau, 0.0), float(tau)
