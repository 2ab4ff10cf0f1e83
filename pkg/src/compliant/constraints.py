"""Cable actuators and effector points as constraint rows.

Row conventions used everywhere in the package:

* actuator violation ``delta_a = rest_length - length(x)`` (pull-in, >= 0
  when pulled); its row of ``H_a`` is ``-d length / dx``;
* effector violation ``delta_e = x_effector - x_goal``; its rows of ``H_e``
  select (or barycentrically interpolate) the effector DOFs.

Stacked matrices put the effector rows first, then the actuator rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateConstraintError

SEGMENT_EPS = 1e-9


@dataclass(frozen=True)
class CableActuator:
    via_nodes: tuple
    lambda_bounds: tuple = (0.0, np.inf)
    delta_bounds: tuple = (-np.inf, np.inf)
    pull_anchor: Optional[tuple] = None
    rest_length: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "via_nodes", tuple(int(i) for i in self.via_nodes))
        object.__setattr__(self, "lambda_bounds", tuple(float(v) for v in self.lambda_bounds))
        object.__setattr__(self, "delta_bounds", tuple(float(v) for v in self.delta_bounds))
        if self.pull_anchor is not None:
            object.__setattr__(self, "pull_anchor", tuple(float(v) for v in self.pull_anchor))
        n_points = len(self.via_nodes) + (self.pull_anchor is not None)
        if n_points < 2:
            raise ValueError("a cable needs at least two path points")
        if self.lambda_bounds[0] < 0:
            raise ValueError("cables can only pull: lambda_min must be >= 0")
        if self.lambda_bounds[0] > self.lambda_bounds[1]:
            raise ValueError(f"empty force interval {self.lambda_bounds}")
        if self.delta_bounds[0] > self.delta_bounds[1]:
            raise ValueError(f"empty course interval {self.delta_bounds}")

    def bind(self, rest_nodes: np.ndarray) -> "CableActuator":
        """Copy with ``rest_length`` measured on ``rest_nodes``."""
        if max(self.via_nodes) >= len(rest_nodes) or min(self.via_nodes) < 0:
            raise ValueError(f"cable via node out of range ({len(rest_nodes)} nodes)")
        return replace(self, rest_length=cable_length(rest_nodes, self))

    @property
    def course(self) -> float:
        lo, hi = self.delta_bounds
        return hi - lo


@dataclass(frozen=True)
class Effector:
    """A controlled material point: a node, or a barycentric point of a tet."""

    nodes: tuple
    weights: tuple = (1.0,)
    goal: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(int(i) for i in self.nodes))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(3))
        if len(self.nodes) != len(self.weights):
            raise ValueError("effector nodes and weights differ in length")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"barycentric weights must sum to 1, got {sum(self.weights)}")

    @classmethod
    def at_node(cls, node: int, goal=(0.0, 0.0, 0.0)) -> "Effector":
        return cls((node,), (1.0,), goal)

    @classmethod
    def in_tet(cls, tet_nodes: Sequence[int], bary: Sequence[float], goal=(0.0, 0.0, 0.0)) -> "Effector":
        return cls(tuple(tet_nodes), tuple(bary), goal)

    def position(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.weights) @ x[list(self.nodes)]

    def with_goal(self, goal) -> "Effector":
        return replace(self, goal=np.asarray(goal, dtype=float))


# ------------------------------------------------------------------------ cables

def _path(x: np.ndarray, cable: CableActuator) -> np.ndarray:
    pts = x[list(cable.via_nodes)]
    if cable.pull_anchor is not None:
        pts = np.vstack([np.asarray(cable.pull_anchor)[None, :], pts])
    return pts


def cable_length(x: np.ndarray, cable: CableActuator) -> float:
    seg = np.diff(_path(x, cable), axis=0)
    return float(np.linalg.norm(seg, axis=1).sum())


def cable_pull_in(x: np.ndarray, cable: CableActuator) -> float:
    """delta_a: rest length minus current length."""
    return cable.rest_length - cable_length(x, cable)


def _unit_segments(x, cable):
    seg = np.diff(_path(x, cable), axis=0)
    ln = np.linalg.norm(seg, axis=1)
    if np.any(ln <= SEGMENT_EPS):
        k = int(np.argmin(ln))
        raise DegenerateConstraintError(f"cable segment {k} has zero length")
    return seg / ln[:, None], ln


def cable_length_gradient(x: np.ndarray, cable: CableActuator, n_nodes: int | None = None) -> np.ndarray:
    """d length / dx as an (n, 3) array."""
    u, _ = _unit_segments(x, cable)
    n_nodes = len(x) if n_nodes is None else n_nodes
    g = np.zeros((n_nodes, 3))
    off = 1 if cable.pull_anchor is not None else 0
    # point p of the path gets +u[p-1] (segment ending at p) and -u[p] (segment starting at p)
    for k, node in enumerate(cable.via_nodes):
        p = k + off
        if p > 0:
            g[node] += u[p - 1]
        if p < len(u):
            g[node] -= u[p]
    return g


def cable_jacobian(x: np.ndarray, cable: CableActuator) -> np.ndarray:
    """Row d length / dx over the 3n DOFs."""
    return cable_length_gradient(x, cable).ravel()


def cable_hessian_triplets(x: np.ndarray, cable: CableActuator):
    """Sparse triplets of d^2 length / dx^2 (the cable geometric stiffness per unit tension)."""
    u, ln = _unit_segments(x, cable)
    pts = ([-1] if cable.pull_anchor is not None else []) + list(cable.via_nodes)
    rows, cols, vals = [], [], []
    eye = np.eye(3)
    for k in range(len(u)):
        h = (eye - np.outer(u[k], u[k])) / ln[k]
        a, b = pts[k], pts[k + 1]
        for p, q, sgn in ((a, a, 1.0), (b, b, 1.0), (a, b, -1.0), (b, a, -1.0)):
            if p < 0 or q < 0:
                continue
            r = 3 * p + np.arange(3)
            c = 3 * q + np.arange(3)
            rows.append(np.repeat(r, 3))
            cols.append(np.tile(c, 3))
            vals.append(sgn * h.ravel())
    if not rows:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


# --------------------------------------------------------------------- effectors

def effector_rows(x: np.ndarray, effector: Effector):
    """Three rows of H_e and the violation delta_e = x_effector - x_goal."""
    H = np.zeros((3, x.size))
    for node, w in zip(effector.nodes, effector.weights):
        for i in range(3):
            H[i, 3 * node + i] += w
    return H, effector.position(x) - effector.goal


# ------------------------------------------------------------------------- stacks

@dataclass(frozen=True)
class ConstraintSet:
    actuators: tuple
    effectors: tuple

    @property
    def n_effector_rows(self) -> int:
        return 3 * len(self.effectors)

    @property
    def n_actuators(self) -> int:
        return len(self.actuators)

    @property
    def size(self) -> int:
        return self.n_effector_rows + self.n_actuators

    def matrices(self, x: np.ndarray):
        """(H_e, H_a) as dense arrays over the 3n DOFs."""
        He = np.zeros((self.n_effector_rows, x.size))
        for k, eff in enumerate(self.effectors):
            He[3 * k:3 * k + 3], _ = effector_rows(x, eff)
        Ha = np.zeros((self.n_actuators, x.size))
        for k, cable in enumerate(self.actuators):
            Ha[k] = -cable_jacobian(x, cable)
        return He, Ha

    def violations(self, x: np.ndarray):
        """(delta_e, delta_a) at positions ``x``."""
        de = np.concatenate([eff.position(x) - eff.goal for eff in self.effectors]) if self.effectors else np.zeros(0)
        da = np.array([cable_pull_in(x, c) for c in self.actuators])
        return de, da

    def effector_positions(self, x: np.ndarray) -> np.ndarray:
        return np.array([eff.position(x) for eff in self.effectors]).reshape(-1, 3)

    def with_goals(self, goals) -> "ConstraintSet":
        goals = np.asarray(goals, dtype=float).reshape(-1, 3)
        if len(goals) != len(self.effectors):
            raise ValueError(f"expected {len(self.effectors)} goals, got {len(goals)}")
        return replace(self, effectors=tuple(e.with_goal(g) for e, g in zip(self.effectors, goals)))
