"""Inverse-actuation QPs.

``solve_lsq_qp`` is a primal active-set method for

    min  1/2 ||M u - v||^2 + 1/2 eps ||u||^2
    s.t. lb <= u <= ub,   bl <= A u <= bu

Equality-constrained subproblems are solved in the null space of the
working set as stacked least squares ``[M Z; sqrt(eps) Z]``, which stays
well conditioned when ``eps`` is tiny. A feasible start comes from a slack
phase whose optimum doubles as an infeasibility certificate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import ConvergenceError, InfeasibleError, SingularityError

log = logging.getLogger(__name__)

REG_FACTOR = 1e-9
KKT_TOL = 1e-8
# multipliers are dropped down to roundoff so the tiny Tikhonov tie-break
# among redundant actuations is honoured, not just the KKT tolerance
DROP_TOL = 1e-14


@dataclass
class QPResult:
    lam: np.ndarray
    objective: float
    active_set: list
    iters: int
    kkt: dict = field(default_factory=dict)
    working: tuple = ()

    def diagnostics(self) -> dict:
        return {"kkt": self.kkt, "active_set": list(self.active_set), "iters": self.iters}


# ------------------------------------------------------------------ constraints

class _Inequalities:
    """All finite sides as rows a_i^T u <= b_i, with readable labels."""

    def __init__(self, n, lb, ub, A, bl, bu, names):
        rows, rhs, labels = [], [], []
        eye = np.eye(n)
        vname = names.get("var", "u")
        for j in range(n):
            if np.isfinite(lb[j]):
                rows.append(-eye[j]); rhs.append(-lb[j]); labels.append(f"{vname}_min[{j}]")
            if np.isfinite(ub[j]):
                rows.append(eye[j]); rhs.append(ub[j]); labels.append(f"{vname}_max[{j}]")
        gname = names.get("row", "row")
        for r in range(len(A)):
            if np.isfinite(bl[r]):
                rows.append(-A[r]); rhs.append(-bl[r]); labels.append(f"{gname}_min[{r}]")
            if np.isfinite(bu[r]):
                rows.append(A[r]); rhs.append(bu[r]); labels.append(f"{gname}_max[{r}]")
        self.C = np.array(rows).reshape(-1, n)
        self.b = np.array(rhs, dtype=float)
        self.labels = labels
        self.norms = np.linalg.norm(self.C, axis=1) if len(rows) else np.zeros(0)

    def __len__(self):
        return len(self.b)

    def slack(self, u):
        return self.b - self.C @ u


def _null_space(C: np.ndarray, n: int) -> np.ndarray:
    if len(C) == 0:
        return np.eye(n)
    _, s, Vt = np.linalg.svd(C)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
    return Vt[rank:].T


def _independent(C_work: np.ndarray, row: np.ndarray) -> bool:
    if len(C_work) == 0:
        return np.linalg.norm(row) > 0
    stacked = np.vstack([C_work, row])
    s = np.linalg.svd(stacked, compute_uv=False)
    return s[-1] > 1e-10 * s[0]


def _face_solution(M, v, eps, C_w, b_w, n):
    """Minimizer of the objective on the face {C_w u = b_w}."""
    if len(C_w):
        u0 = np.linalg.lstsq(C_w, b_w, rcond=None)[0]
    else:
        u0 = np.zeros(n)
    Z = _null_space(C_w, n)
    if Z.shape[1] == 0:
        return u0
    lhs = np.vstack([M @ Z, np.sqrt(eps) * Z])
    rhs = np.concatenate([v - M @ u0, -np.sqrt(eps) * u0])
    y = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return u0 + Z @ y


def _gradient(M, v, eps, u):
    return M.T @ (M @ u - v) + eps * u


def _active_set_core(M, v, eps, ineq: _Inequalities, u, working, max_iter, tol):
    n = len(u)
    working = list(working)
    iters = 0
    for iters in range(1, max_iter + 1):
        C_w = ineq.C[working] if working else np.zeros((0, n))
        target = _face_solution(M, v, eps, C_w, ineq.b[working], n)
        p = target - u
        if np.linalg.norm(p) <= tol * (1.0 + np.linalg.norm(u)):
            grad = _gradient(M, v, eps, u)
            if not working:
                return u, working, iters
            mu = np.linalg.lstsq(C_w.T, -grad, rcond=None)[0]
            scale = np.linalg.norm(M.T) * (np.linalg.norm(M) * np.linalg.norm(u) + np.linalg.norm(v))
            scale += eps * np.linalg.norm(u) + 1e-300
            mu_scaled = mu * ineq.norms[working]
            j = int(np.argmin(mu_scaled))
            if mu_scaled[j] >= -DROP_TOL * scale:
                return u, working, iters
            working.pop(j)
            continue
        Cp = ineq.C @ p
        slack = ineq.slack(u)
        alpha, block = 1.0, None
        in_w = np.zeros(len(ineq), dtype=bool)
        in_w[working] = True
        for i in np.flatnonzero((~in_w) & (Cp > 1e-14 * ineq.norms * np.linalg.norm(p))):
            a = max(slack[i], 0.0) / Cp[i]
            if a < alpha:
                alpha, block = a, int(i)
        u = u + alpha * p
        if block is not None:
            if _independent(C_w, ineq.C[block]):
                working.append(block)
            else:
                log.debug("blocking constraint %s dependent on working set", ineq.labels[block])
    raise ConvergenceError("active-set QP exceeded its iteration budget", float(np.linalg.norm(p)))


def _initial_working(ineq: _Inequalities, u, warm_labels, tol):
    slack = ineq.slack(u)
    active = np.flatnonzero(slack <= tol * (1.0 + ineq.norms * np.linalg.norm(u) + np.abs(ineq.b)))
    order = list(active)
    if warm_labels is not None:
        pref = [i for i in active if ineq.labels[i] in set(warm_labels)]
        order = pref + [i for i in active if i not in pref]
    working = []
    for i in order:
        C_w = ineq.C[working] if working else np.zeros((0, len(u)))
        if _independent(C_w, ineq.C[i]):
            working.append(int(i))
    return working


def kkt_residuals(M, v, eps, u, lb=None, ub=None, A=None, bl=None, bu=None) -> dict:
    """Relative KKT residuals of ``u``, with multipliers recomputed by NNLS.

    Independent of the solver: only the problem data and the point are used.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[1]
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float)).reshape(-1, n)
    bl = np.full(len(A), -np.inf) if bl is None else np.asarray(bl, dtype=float)
    bu = np.full(len(A), np.inf) if bu is None else np.asarray(bu, dtype=float)
    ineq = _Inequalities(n, lb, ub, A, bl, bu, {})
    grad = _gradient(M, v, eps, u)
    unorm = np.linalg.norm(u)
    scale = np.linalg.norm(M.T) * (np.linalg.norm(M) * unorm + np.linalg.norm(v)) + eps * unorm
    scale = max(scale, 1e-300)
    if len(ineq) == 0:
        return {"stationarity": float(np.linalg.norm(grad) / scale), "primal": 0.0,
                "dual": 0.0, "complementarity": 0.0}
    slack = ineq.slack(u)
    cscale = ineq.norms * (1.0 + unorm) + np.abs(ineq.b)
    primal = float(np.max(np.maximum(-slack, 0.0) / cscale))
    act = np.flatnonzero(slack <= 1e-9 * cscale)
    if len(act):
        mu, _ = nnls(ineq.C[act].T, -grad)
        stat = np.linalg.norm(grad + ineq.C[act].T @ mu)
        comp = float(np.max(np.abs(mu * slack[act])) / (scale * (1.0 + unorm)))
    else:
        stat, comp = np.linalg.norm(grad), 0.0
    return {"stationarity": float(stat / scale), "primal": primal, "dual": 0.0,
            "complementarity": comp}


def solve_lsq_qp(M, v, eps=0.0, lb=None, ub=None, A=None, bl=None, bu=None,
                 warm_start=None, warm_active=None, names=None, max_iter=None) -> QPResult:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = np.asarray(v, dtype=float).ravel()
    n = M.shape[1]
    if eps < 0:
        raise ValueError("regularization weight must be non-negative")
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    if np.any(lb > ub):
        raise InfeasibleError(float(np.max(lb - ub)), None)
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float)).reshape(-1, n)
    bl = np.full(len(A), -np.inf) if bl is None else np.asarray(bl, dtype=float)
    bu = np.full(len(A), np.inf) if bu is None else np.asarray(bu, dtype=float)
    if np.any(bl > bu):
        raise InfeasibleError(float(np.max(bl - bu)), None)
    names = names or {}
    ineq = _Inequalities(n, lb, ub, A, bl, bu, names)
    max_iter = max_iter or 50 * (n + len(ineq) + 1)
    tol = 1e-11

    start = np.zeros(n) if warm_start is None else np.asarray(warm_start, dtype=float).copy()
    start = np.clip(start, lb, ub)
    Au = A @ start
    viol = np.maximum(np.maximum(Au - bu, bl - Au), 0.0) if len(A) else np.zeros(0)
    feas_scale = 1.0 + (np.max(np.abs(np.concatenate([b[np.isfinite(b)] for b in (bl, bu)] + [[0.0]]))))
    if len(A) and np.any(viol > 1e-12 * feas_scale):
        start = _phase_one(A, bl, bu, lb, ub, start, viol, feas_scale)

    working = _initial_working(ineq, start, warm_active, 1e-12)
    u, working, iters = _active_set_core(M, v, eps, ineq, start, working, max_iter, tol)
    working = sorted(working)
    C_w = ineq.C[working] if working else np.zeros((0, n))
    u = _face_solution(M, v, eps, C_w, ineq.b[working], n)
    objective = 0.5 * float(np.sum((M @ u - v) ** 2) + eps * u @ u)
    kkt = kkt_residuals(M, v, eps, u, lb, ub, A, bl, bu)
    return QPResult(u, objective, [ineq.labels[i] for i in working], iters, kkt, tuple(working))


def _phase_one(A, bl, bu, lb, ub, start, viol, feas_scale):
    """Minimize the squared violation of the general rows over the variable box."""
    m, n = A.shape
    # variables (u, s); one slack per general row shared by both sides
    M1 = np.hstack([np.zeros((m, n)), np.eye(m)])
    A1 = np.vstack([np.hstack([A, -np.eye(m)]), np.hstack([A, np.eye(m)])])
    bl1 = np.concatenate([np.full(m, -np.inf), bl])
    bu1 = np.concatenate([bu, np.full(m, np.inf)])
    lb1 = np.concatenate([lb, np.zeros(m)])
    ub1 = np.concatenate([ub, np.full(m, np.inf)])
    ineq = _Inequalities(n + m, lb1, ub1, A1, bl1, bu1, {})
    z = np.concatenate([start, viol])
    working = _initial_working(ineq, z, None, 1e-12)
    z, _, _ = _active_set_core(M1, np.zeros(m), 1e-14, ineq, z, working, 50 * (n + 3 * m + 1), 1e-12)
    u, s = z[:n], z[n:]
    if np.max(s) > 1e-9 * feas_scale:
        raise InfeasibleError(float(np.max(s)), u)
    return np.clip(u, lb, ub)


# --------------------------------------------------------------- inverse problem

def default_regularization(M: np.ndarray) -> float:
    return REG_FACTOR * float(np.trace(M.T @ M))


@dataclass
class InverseProblem:
    """min ||W_ea lam + delta_e_free||^2 + eps ||lam||^2 under both actuator boxes."""

    W_ea: np.ndarray
    W_aa: np.ndarray
    delta_e_free: np.ndarray
    delta_a_free: np.ndarray
    lambda_bounds: np.ndarray
    delta_bounds: np.ndarray
    eps_reg: float | None = None

    def __post_init__(self):
        self.W_ea = np.atleast_2d(np.asarray(self.W_ea, dtype=float))
        m = self.W_ea.shape[1]
        self.W_aa = np.asarray(self.W_aa, dtype=float).reshape(m, m)
        self.delta_e_free = np.asarray(self.delta_e_free, dtype=float).reshape(len(self.W_ea))
        self.delta_a_free = np.asarray(self.delta_a_free, dtype=float).reshape(m)
        self.lambda_bounds = np.asarray(self.lambda_bounds, dtype=float).reshape(m, 2)
        self.delta_bounds = np.asarray(self.delta_bounds, dtype=float).reshape(m, 2)
        if np.any(self.lambda_bounds[:, 0] > self.lambda_bounds[:, 1]):
            raise ValueError("lambda_min > lambda_max")
        if np.any(self.delta_bounds[:, 0] > self.delta_bounds[:, 1]):
            raise ValueError("delta_min > delta_max")

    @classmethod
    def from_state(cls, state, cables, eps_reg=None, delta_e_free=None, delta_a_free=None):
        return cls(
            W_ea=state.W_ea,
            W_aa=state.W_aa,
            delta_e_free=state.delta_e_free if delta_e_free is None else delta_e_free,
            delta_a_free=state.delta_a_free if delta_a_free is None else delta_a_free,
            lambda_bounds=[c.lambda_bounds for c in cables],
            delta_bounds=[c.delta_bounds for c in cables],
            eps_reg=eps_reg,
        )

    @property
    def eps(self) -> float:
        return default_regularization(self.W_ea) if self.eps_reg is None else float(self.eps_reg)

    def lsq_data(self):
        return dict(
            M=self.W_ea,
            v=-self.delta_e_free,
            eps=self.eps,
            lb=self.lambda_bounds[:, 0],
            ub=self.lambda_bounds[:, 1],
            A=self.W_aa,
            bl=self.delta_bounds[:, 0] - self.delta_a_free,
            bu=self.delta_bounds[:, 1] - self.delta_a_free,
        )

    def objective(self, lam) -> float:
        r = self.W_ea @ lam + self.delta_e_free
        return float(r @ r + self.eps * lam @ lam)


def solve_inverse(problem: InverseProblem, warm_start=None, warm_active=None) -> QPResult:
    data = problem.lsq_data()
    return solve_lsq_qp(
        **data, warm_start=warm_start, warm_active=warm_active,
        names={"var": "lambda", "row": "delta"},
    )


# --------------------------------------------------------------- coupled grasp

@dataclass
class CoupledProblem:
    """Two fingers bound by an equal-and-opposite effector force lam_e.

    Positions are predicted incrementally from the previous step:
    P1 = P1_prev + W_ea1 dlam1 + W_ee1 dlam_e and
    P2 = P2_prev + W_ea2 dlam2 - W_ee2 dlam_e, subject to P1 + beta = P2.
    """

    W_ea1: np.ndarray
    W_ee1: np.ndarray
    W_aa1: np.ndarray
    W_ea2: np.ndarray
    W_ee2: np.ndarray
    W_aa2: np.ndarray
    lam1_prev: np.ndarray
    lam2_prev: np.ndarray
    lam_e_prev: np.ndarray
    P1_prev: np.ndarray
    P2_prev: np.ndarray
    goal: np.ndarray
    beta: np.ndarray
    lambda_bounds1: np.ndarray
    lambda_bounds2: np.ndarray
    delta_bounds1: np.ndarray | None = None
    delta_bounds2: np.ndarray | None = None
    delta_a_free1: np.ndarray | None = None
    delta_a_free2: np.ndarray | None = None
    lambda_e_bounds: np.ndarray | None = None
    eps_reg: float | None = None
    incremental_reg: bool = True


@dataclass
class CoupledResult:
    lam1: np.ndarray
    lam2: np.ndarray
    lam_e: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    equality_residual: float
    qp: QPResult


def solve_coupled(problem: CoupledProblem, warm_start=None, warm_active=None) -> CoupledResult:
    p = problem
    A1, A2 = np.asarray(p.W_ea1, float), np.asarray(p.W_ea2, float)
    E1, E2 = np.asarray(p.W_ee1, float), np.asarray(p.W_ee2, float)
    m1, m2 = A1.shape[1], A2.shape[1]
    E = E1 + E2
    cond = np.linalg.cond(E)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularityError("coupling block W_ee1 + W_ee2 is singular", cond)
    Einv = np.linalg.inv(E)
    T = E1 @ Einv
    c0 = np.asarray(p.P2_prev) - np.asarray(p.P1_prev) - np.asarray(p.beta)
    u_prev = np.concatenate([p.lam1_prev, p.lam2_prev])
    M = np.hstack([E2 @ Einv @ A1, T @ A2])
    v = np.asarray(p.goal) - np.asarray(p.P1_prev) - T @ c0 + M @ u_prev
    # lam_e = N u + n0
    N = Einv @ np.hstack([-A1, A2])
    n0 = np.asarray(p.lam_e_prev) + Einv @ c0 - N @ u_prev

    rows, bl, bu = [], [], []
    for k, (Waa, db, dfree) in enumerate(
        ((p.W_aa1, p.delta_bounds1, p.delta_a_free1), (p.W_aa2, p.delta_bounds2, p.delta_a_free2))
    ):
        if db is None:
            continue
        Waa = np.asarray(Waa, float)
        db = np.asarray(db, float).reshape(-1, 2)
        row = np.zeros((len(Waa), m1 + m2))
        if k == 0:
            row[:, :m1] = Waa
        else:
            row[:, m1:] = Waa
        rows.append(row)
        bl.append(db[:, 0] - dfree)
        bu.append(db[:, 1] - dfree)
    if p.lambda_e_bounds is not None:
        eb = np.asarray(p.lambda_e_bounds, float).reshape(3, 2)
        rows.append(N)
        bl.append(eb[:, 0] - n0)
        bu.append(eb[:, 1] - n0)
    A = np.vstack(rows) if rows else None
    lb = np.concatenate([np.asarray(p.lambda_bounds1, float).reshape(-1, 2)[:, 0],
                         np.asarray(p.lambda_bounds2, float).reshape(-1, 2)[:, 0]])
    ub = np.concatenate([np.asarray(p.lambda_bounds1, float).reshape(-1, 2)[:, 1],
                         np.asarray(p.lambda_bounds2, float).reshape(-1, 2)[:, 1]])
    eps = default_regularization(M) if p.eps_reg is None else float(p.eps_reg)
    bl = None if A is None else np.concatenate(bl)
    bu = None if A is None else np.concatenate(bu)
    # the tie-break among redundant actuations is centred on the previous
    # forces by default, so a converged loop is an exact fixed point
    c = u_prev if p.incremental_reg else np.zeros_like(u_prev)
    Ac = None if A is None else A @ c
    res = solve_lsq_qp(
        M, v - M @ c, eps, lb - c, ub - c, A,
        None if A is None else bl - Ac,
        None if A is None else bu - Ac,
        warm_start=None if warm_start is None else np.asarray(warm_start) - c,
        warm_active=warm_active, names={"var": "lambda", "row": "coupled"},
    )
    res.lam = res.lam + c
    u = res.lam
    lam1, lam2 = u[:m1], u[m1:]
    lam_e = N @ u + n0
    d_e = lam_e - np.asarray(p.lam_e_prev)
    P1 = np.asarray(p.P1_prev) + A1 @ (lam1 - p.lam1_prev) + E1 @ d_e
    P2 = np.asarray(p.P2_prev) + A2 @ (lam2 - p.lam2_prev) - E2 @ d_e
    eq = float(np.linalg.norm(P1 + np.asarray(p.beta) - P2))
    return CoupledResult(lam1, lam2, lam_e, P1, P2, eq, res)
