"""Compliance projected in constraint space (Schur complements) and direct kinematics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSet
from .errors import DegenerateConstraintError, SingularityError
from .fem import Factorization, FemSystem

MAX_COND = 1e12


@dataclass
class CondensedState:
    """W ordered [effector rows; actuator rows] plus the free violations.

    ``delta_a`` is the actuation state at the linearization point and
    ``effector_positions`` the effector positions there (not the free ones).
    """

    W: np.ndarray
    delta_e_free: np.ndarray
    delta_a_free: np.ndarray
    delta_a: np.ndarray
    n_effector_rows: int
    effector_positions: np.ndarray | None = None

    @property
    def W_ee(self) -> np.ndarray:
        k = self.n_effector_rows
        return self.W[:k, :k]

    @property
    def W_ea(self) -> np.ndarray:
        k = self.n_effector_rows
        return self.W[:k, k:]

    @property
    def W_ae(self) -> np.ndarray:
        k = self.n_effector_rows
        return self.W[k:, :k]

    @property
    def W_aa(self) -> np.ndarray:
        k = self.n_effector_rows
        return self.W[k:, k:]

    @property
    def size(self) -> int:
        return len(self.W)


def tri_flatten(W: np.ndarray) -> np.ndarray:
    """Row-major upper triangle, diagonal included."""
    return W[np.triu_indices(len(W))]


def tri_unflatten(v: np.ndarray, size: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if len(v) != size * (size + 1) // 2:
        raise ValueError(f"{len(v)} values do not form the triangle of a {size}x{size} matrix")
    W = np.zeros((size, size))
    iu = np.triu_indices(size)
    W[iu] = v
    W[(iu[1], iu[0])] = v
    return W


def condense(
    system: FemSystem,
    constraints: ConstraintSet | None = None,
    factorization: Factorization | None = None,
) -> CondensedState:
    """Schur complements W_ij = H_i K^-1 H_j^T at the current equilibrium.

    The free configuration is one linear step from the current state with
    the actuation removed, ``K dx_free = f_ext - f_int(x)``; both free
    violations are evaluated there. One factorization serves every column.
    """
    cs = system.model.constraint_set() if constraints is None else constraints
    x = system.x
    fac = system.factorize(x, system.lam) if factorization is None else factorization
    He, Ha = cs.matrices(x)
    H = np.vstack([He, Ha])[:, system.free]
    zero = np.flatnonzero(np.abs(H).max(axis=1) == 0.0) if len(H) else []
    if len(zero):
        raise DegenerateConstraintError(f"constraint row {int(zero[0])} has no free DOF")

    r = (system.f_ext - system.internal_forces(x)).ravel()[system.free]
    dx_free = np.zeros(3 * system.n)
    if len(H):
        sol = fac.solve(np.column_stack([r, H.T]))
        dx_free[system.free] = sol[:, 0]
        W = H @ sol[:, 1:]
    else:
        dx_free[system.free] = fac.solve(r)
        W = np.zeros((0, 0))
    x_free = x + dx_free.reshape(-1, 3)
    de_free, da_free = cs.violations(x_free)
    _, da = cs.violations(x)
    return CondensedState(
        W=W,
        delta_e_free=de_free,
        delta_a_free=da_free,
        delta_a=da,
        n_effector_rows=cs.n_effector_rows,
        effector_positions=cs.effector_positions(x),
    )


def direct_jacobian(state: CondensedState) -> np.ndarray:
    """J = W_ea W_aa^-1: effector motion per unit actuator displacement."""
    Waa = state.W_aa
    cond = np.linalg.cond(Waa)
    if not np.isfinite(cond) or cond > MAX_COND:
        raise SingularityError("W_aa is near-singular", cond)
    return np.linalg.solve(Waa.T, state.W_ea.T).T
