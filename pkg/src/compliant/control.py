"""Closed-loop inverse control with full or learned condensed mechanics.

Each step linearizes the robot at its current equilibrium, solves the
inverse QP for cable forces, applies them in the FEM model and measures
where the effector went. In learned mode the compliance blocks come from
the surrogate; the effector free violation is rebuilt from the measured
effector position, ``delta_e_free = (P_t - goal) - W_ea lam_t``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .condense import condense
from .constraints import cable_pull_in
from .errors import ConfigError
from .fem import FemSystem
from .qp import CoupledProblem, InverseProblem, solve_coupled, solve_inverse

log = logging.getLogger(__name__)

MODES = ("full", "learned")


@dataclass
class ControlConfig:
    mode: str = "full"
    tol_goal: float = 0.5
    max_steps: int = 50
    eps_reg: float | None = None
    alpha: float = 0.25
    stall_tol: float = 1e-9
    stall_steps: int = 3
    tol_newton: float = 1e-6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.tol_goal > 0:
            raise ConfigError("tol_goal must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")


@dataclass
class StepRecord:
    step: int
    goal_index: int
    goal: np.ndarray
    effector: np.ndarray
    err_norm: float
    lam: np.ndarray
    delta_a: np.ndarray
    mode: str
    qp: dict = field(default_factory=dict)
    extrapolated: bool = False


@dataclass
class GoalResult:
    goal: np.ndarray
    final_error: float
    steps: int
    converged: bool


def _course(cables) -> np.ndarray:
    out = []
    for c in cables:
        lo, hi = c.delta_bounds
        out.append(hi - lo if np.isfinite(hi - lo) else np.inf)
    return np.array(out)


def clamp_factor(W_aa: np.ndarray, dlam: np.ndarray, course: np.ndarray, alpha: float) -> float:
    """Largest s <= 1 keeping |W_aa s dlam| within alpha times each course."""
    move = np.abs(W_aa @ dlam)
    limit = alpha * course
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(move > limit, limit / move, 1.0)
    return float(min(1.0, ratios.min(initial=1.0)))


class ControlSession:
    """Owns one FEM system and steps it toward effector goals."""

    def __init__(self, model, config: ControlConfig, surrogate=None, system: FemSystem | None = None):
        if config.mode == "learned" and surrogate is None:
            raise ConfigError("learned mode needs a trained model")
        if surrogate is not None and surrogate.n_actuators != len(model.cables):
            raise ConfigError(
                f"model predicts {surrogate.n_actuators} actuators, robot has {len(model.cables)}"
            )
        self.model = model
        self.config = config
        self.surrogate = surrogate
        if system is None:
            system = FemSystem(model, tol_newton=config.tol_newton)
            system.solve_free()
        self.system = system
        self.course = _course(model.cables)
        self.records: list[StepRecord] = []
        self._warm = None
        self._step = 0

    # ------------------------------------------------------------ state
    @property
    def lam(self) -> np.ndarray:
        return self.system.lam

    def effector_position(self) -> np.ndarray:
        return self.model.constraint_set().effector_positions(self.system.x)

    def delta_a(self) -> np.ndarray:
        return np.array([cable_pull_in(self.system.x, c) for c in self.model.cables])

    def linearize(self, goal) -> InverseProblem:
        """Inverse problem at the current equilibrium for ``goal`` (k, 3)."""
        goal = np.asarray(goal, dtype=float).reshape(-1, 3)
        cs = self.model.constraint_set(goal)
        cables = self.model.cables
        if self.config.mode == "full":
            st = condense(self.system, cs)
            return InverseProblem.from_state(st, cables, self.config.eps_reg)
        W, da_free = self.surrogate.predict(self.delta_a())
        k = cs.n_effector_rows
        W_ea, W_aa = W[:k, k:], W[k:, k:]
        de = (self.effector_position() - goal).ravel()
        return InverseProblem(
            W_ea, W_aa, de - W_ea @ self.lam, da_free,
            [c.lambda_bounds for c in cables], [c.delta_bounds for c in cables],
            self.config.eps_reg,
        )

    # -------------------------------------------------------------- steps
    def step(self, goal, goal_index: int = 0) -> StepRecord:
        goal = np.asarray(goal, dtype=float).reshape(-1, 3)
        extrapolated = False
        if self.config.mode == "learned":
            out = self.surrogate.outside_hull(self.delta_a())
            if out.any():
                extrapolated = True
                log.warning("actuation %s leaves the training range on cables %s",
                            np.round(self.delta_a(), 6).tolist(), np.flatnonzero(out).tolist())
        problem = self.linearize(goal)
        res = solve_inverse(problem, warm_active=self._warm)
        self._warm = res.active_set
        dlam = res.lam - self.lam
        s = clamp_factor(problem.W_aa, dlam, self.course, self.config.alpha)
        lam_new = np.clip(self.lam + s * dlam, problem.lambda_bounds[:, 0], problem.lambda_bounds[:, 1])
        self.system.solve_with_actuation(lam_new)
        pos = self.effector_position()
        rec = StepRecord(
            step=self._step,
            goal_index=goal_index,
            goal=goal.ravel(),
            effector=pos.ravel(),
            err_norm=float(np.linalg.norm(pos - goal)),
            lam=lam_new.copy(),
            delta_a=self.delta_a(),
            mode=self.config.mode,
            qp=dict(res.diagnostics(), clamp=s),
            extrapolated=extrapolated,
        )
        self._step += 1
        self.records.append(rec)
        return rec

    def reach(self, goal, goal_index: int = 0) -> GoalResult:
        """Step until the goal is within tolerance, the forces stall, or max_steps."""
        goal = np.asarray(goal, dtype=float).reshape(-1, 3)
        cfg = self.config
        stall = 0
        steps = 0
        err = float(np.linalg.norm(self.effector_position() - goal))
        for steps in range(1, cfg.max_steps + 1):
            lam_before = self.lam.copy()
            rec = self.step(goal, goal_index)
            err = rec.err_norm
            if err <= cfg.tol_goal:
                return GoalResult(goal.ravel(), err, steps, True)
            stall = stall + 1 if np.linalg.norm(rec.lam - lam_before) <= cfg.stall_tol else 0
            if stall >= cfg.stall_steps:
                log.warning("goal %d: actuation stalled at error %.4g", goal_index, err)
                return GoalResult(goal.ravel(), err, steps, False)
        log.warning("goal %d: not reached in %d steps (error %.4g)", goal_index, cfg.max_steps, err)
        return GoalResult(goal.ravel(), err, steps, False)


def circle_goals(center, radius: float, n: int, phase: float = 0.0) -> np.ndarray:
    """``n`` goals evenly spaced on a horizontal circle."""
    if n < 0:
        raise ValueError("number of goals must be non-negative")
    t = phase + 2.0 * np.pi * np.arange(n) / max(n, 1)
    c = np.asarray(center, dtype=float)
    return np.column_stack([c[0] + radius * np.cos(t), c[1] + radius * np.sin(t), np.full(n, c[2])])


def scenario_circle(session: ControlSession, n: int) -> np.ndarray:
    """Circle around the rest effector at the robot's configured height offset."""
    sc = session.model.scenario.get("circle", {})
    frac = float(sc.get("radius_fraction", 0.25))
    dz = float(sc.get("dz", 0.0))
    H = session.model.height
    center = session.effector_position()[0] + np.array([0.0, 0.0, dz])
    return circle_goals(center, frac * H, n)


def run_trajectory(session: ControlSession, goals) -> list[GoalResult]:
    """Visit goals in order without resetting; non-converged goals are recorded."""
    results = []
    for i, g in enumerate(np.asarray(goals, dtype=float).reshape(-1, 3)):
        results.append(session.reach(g, i))
    return results


def write_trajectory_csv(path, records: list[StepRecord]) -> None:
    if not records:
        header = ["step", "goal_index", "goal_x", "goal_y", "goal_z", "eff_x", "eff_y", "eff_z",
                  "err_norm", "mode"]
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(header)
        return
    m = len(records[0].lam)
    header = (
        ["step", "goal_index", "goal_x", "goal_y", "goal_z", "eff_x", "eff_y", "eff_z", "err_norm"]
        + [f"lambda_{i}" for i in range(m)]
        + [f"delta_a_{i}" for i in range(m)]
        + ["mode"]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            w.writerow(
                [r.step, r.goal_index, *map(repr, map(float, r.goal[:3])), *map(repr, map(float, r.effector[:3])),
                 repr(r.err_norm), *map(repr, map(float, r.lam)), *map(repr, map(float, r.delta_a)), r.mode]
            )


def read_final_errors(path) -> np.ndarray:
    """Last logged error per goal index of a trajectory CSV."""
    final = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            final[int(row["goal_index"])] = float(row["err_norm"])
    return np.array([final[k] for k in sorted(final)])


# ------------------------------------------------------------------ grasp

def reflection(axis: int) -> np.ndarray:
    M = np.eye(3)
    M[axis, axis] = -1.0
    return M


@dataclass
class GraspRecord:
    step: int
    P1: np.ndarray
    P2: np.ndarray
    err_norm: float
    equality_residual: float
    lam1: np.ndarray
    lam2: np.ndarray
    lam_e: np.ndarray
    mode: str
    clamp: float


class GraspSession:
    """Two fingers, the second a mirror image of the first, coupled at the effectors.

    Finger 1 receives the coupling force ``+lam_e`` at its effector and finger 2
    receives ``-lam_e``. In learned mode both fingers share one surrogate; the
    mirrored finger's effector blocks are conjugated with the reflection.
    """

    def __init__(self, model, plane: float, config: ControlConfig, surrogate=None, axis: int = 0):
        if config.mode == "learned" and surrogate is None:
            raise ConfigError("learned mode needs a trained model")
        if len(model.effectors) != 1:
            raise ConfigError("grasping needs exactly one effector per finger")
        self.config = config
        self.surrogate = surrogate
        self.axis = axis
        self.M = reflection(axis)
        self.models = (model, model.mirrored(axis, plane))
        self.systems = []
        for m in self.models:
            fs = FemSystem(m, tol_newton=config.tol_newton)
            fs.solve_free()
            self.systems.append(fs)
        self.lam_e = np.zeros(3)
        self.course = _course(model.cables)
        self.records: list[GraspRecord] = []
        self._warm = None
        self._step = 0

    def positions(self):
        return tuple(m.constraint_set().effector_positions(s.x)[0] for m, s in zip(self.models, self.systems))

    def _blocks(self, i: int):
        m, fs = self.models[i], self.systems[i]
        if self.config.mode == "full":
            st = condense(fs, m.constraint_set())
            return st.W_ee, st.W_ea, st.W_aa
        da = np.array([cable_pull_in(fs.x, c) for c in m.cables])
        if self.surrogate.outside_hull(da).any():
            log.warning("finger %d actuation %s leaves the training range", i + 1, np.round(da, 6).tolist())
        W, _ = self.surrogate.predict(da)
        W_ee, W_ea, W_aa = W[:3, :3], W[:3, 3:], W[3:, 3:]
        if i == 1:
            W_ee, W_ea = self.M @ W_ee @ self.M, self.M @ W_ea
        return W_ee, W_ea, W_aa

    def _apply(self, i: int, lam, force):
        m, fs = self.models[i], self.systems[i]
        eff = m.effectors[0]
        fs.loads[:] = 0.0
        for node, w in zip(eff.nodes, eff.weights):
            fs.loads[node] += w * force
        fs.solve_with_actuation(lam)

    def step(self, goal, beta) -> GraspRecord:
        goal, beta = np.asarray(goal, float), np.asarray(beta, float)
        (E1, A1, Waa1), (E2, A2, Waa2) = self._blocks(0), self._blocks(1)
        P1, P2 = self.positions()
        lam1, lam2 = self.systems[0].lam.copy(), self.systems[1].lam.copy()
        da1 = np.array([cable_pull_in(self.systems[0].x, c) for c in self.models[0].cables])
        da2 = np.array([cable_pull_in(self.systems[1].x, c) for c in self.models[1].cables])
        cables = self.models[0].cables
        problem = CoupledProblem(
            W_ea1=A1, W_ee1=E1, W_aa1=Waa1, W_ea2=A2, W_ee2=E2, W_aa2=Waa2,
            lam1_prev=lam1, lam2_prev=lam2, lam_e_prev=self.lam_e,
            P1_prev=P1, P2_prev=P2, goal=goal, beta=beta,
            lambda_bounds1=[c.lambda_bounds for c in cables],
            lambda_bounds2=[c.lambda_bounds for c in cables],
            delta_bounds1=[c.delta_bounds for c in cables],
            delta_bounds2=[c.delta_bounds for c in cables],
            delta_a_free1=da1 - Waa1 @ lam1,
            delta_a_free2=da2 - Waa2 @ lam2,
            eps_reg=self.config.eps_reg,
        )
        res = solve_coupled(problem, warm_active=self._warm)
        self._warm = res.qp.active_set
        d1, d2, de = res.lam1 - lam1, res.lam2 - lam2, res.lam_e - self.lam_e
        s = min(
            clamp_factor(Waa1, d1, self.course, self.config.alpha),
            clamp_factor(Waa2, d2, self.course, self.config.alpha),
            clamp_factor(E1, de, np.full(3, self.course.min()), self.config.alpha),
        )
        new1 = np.clip(lam1 + s * d1, *np.asarray(problem.lambda_bounds1, float).T)
        new2 = np.clip(lam2 + s * d2, *np.asarray(problem.lambda_bounds2, float).T)
        self.lam_e = self.lam_e + s * de
        self._apply(0, new1, self.lam_e)
        self._apply(1, new2, -self.lam_e)
        P1, P2 = self.positions()
        rec = GraspRecord(
            step=self._step, P1=P1, P2=P2,
            err_norm=float(np.linalg.norm(P1 - goal)),
            equality_residual=float(np.linalg.norm(P1 + beta - P2)),
            lam1=new1, lam2=new2, lam_e=self.lam_e.copy(), mode=self.config.mode, clamp=s,
        )
        self._step += 1
        self.records.append(rec)
        return rec


def run_grasp(session: GraspSession, goal, beta, eq_tol: float = 1e-6) -> GoalResult:
    """Step the coupled fingers until the goal and the grasp equality both hold."""
    cfg = session.config
    rec = None
    for steps in range(1, cfg.max_steps + 1):
        rec = session.step(goal, beta)
        if rec.err_norm <= cfg.tol_goal and rec.equality_residual <= eq_tol:
            return GoalResult(np.asarray(goal, float), rec.err_norm, steps, True)
    log.warning("grasp goal not reached in %d steps (error %.4g, equality %.3g)",
                cfg.max_steps, rec.err_norm, rec.equality_residual)
    return GoalResult(np.asarray(goal, float), rec.err_norm, cfg.max_steps, False)


def write_grasp_csv(path, records: list[GraspRecord], goal, beta) -> None:
    m = len(records[0].lam1) if records else 0
    header = (
        ["step", "goal_x", "goal_y", "goal_z", "eff1_x", "eff1_y", "eff1_z", "eff2_x", "eff2_y", "eff2_z",
         "err_norm"]
        + [f"lambda1_{i}" for i in range(m)]
        + [f"lambda2_{i}" for i in range(m)]
        + ["coupling_fx", "coupling_fy", "coupling_fz", "equality_residual", "mode"]
    )
    goal = np.asarray(goal, float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            w.writerow(
                [r.step, *map(repr, map(float, goal)), *map(repr, map(float, r.P1)), *map(repr, map(float, r.P2)),
                 repr(r.err_norm), *map(repr, map(float, r.lam1)), *map(repr, map(float, r.lam2)),
                 *map(repr, map(float, r.lam_e)), repr(r.equality_residual), r.mode]
            )
