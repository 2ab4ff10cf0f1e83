"""Corotational linear-elastic tetrahedra and quasi-static Newton solves.

Sign convention: ``f_int`` is the internal resisting force, the gradient of
the elastic energy, and ``K = d f_int / dx``. Static equilibrium reads

    f_ext - f_int(x) + H_a^T lam_a = 0

with ``H_a = d delta_a / dx`` (cable pull-in gradient), so that positive
tension pulls the cable in.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, ElementInversionError, FactorizationError

log = logging.getLogger(__name__)

TOL_NEWTON = 1e-6
MAX_ITERS = 50


@dataclass(frozen=True)
class Material:
    young_modulus: float
    poisson_ratio: float
    density: float = 0.0

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ValueError(f"young_modulus must be positive, got {self.young_modulus}")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError(f"poisson_ratio must be in [0, 0.5), got {self.poisson_ratio}")
        if self.density < 0:
            raise ValueError("density must be non-negative")


def lame(young, poisson):
    young = np.asarray(young, dtype=float)
    poisson = np.asarray(poisson, dtype=float)
    mu = young / (2.0 * (1.0 + poisson))
    lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return mu, lam


# ---------------------------------------------------------------- element kernel

def shape_gradients(rest: np.ndarray, tets: np.ndarray):
    """Rest volumes and gradients of the linear shape functions, (ne, 4, 3)."""
    p = rest[tets]
    Dm = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))
    vol = np.linalg.det(Dm) / 6.0
    Bm = np.linalg.inv(Dm)
    grads = np.empty((len(tets), 4, 3))
    grads[:, 1:] = Bm
    grads[:, 0] = -Bm.sum(axis=1)
    return vol, grads


def deformation_gradient(x: np.ndarray, tets: np.ndarray, grads: np.ndarray) -> np.ndarray:
    return np.einsum("eai,eaj->eij", x[tets], grads)


def _polar(F: np.ndarray):
    det = np.linalg.det(F)
    bad = np.flatnonzero(det <= 0.0)
    if len(bad):
        raise ElementInversionError(int(bad[0]), float(det[bad[0]]))
    U, sig, Vt = np.linalg.svd(F)
    R = U @ Vt
    S = np.einsum("eki,ek,ekj->eij", Vt, sig, Vt)
    return R, S


def _skew(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -w[..., 2], w[..., 1]
    out[..., 1, 0], out[..., 1, 2] = w[..., 2], -w[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -w[..., 1], w[..., 0]
    return out


def element_energy_forces(F, vol, grads, mu, lam):
    """Energy per element and nodal internal forces (ne, 4, 3)."""
    R, S = _polar(F)
    eye = np.eye(3)
    tr = np.trace(S, axis1=1, axis2=2) - 3.0
    energy = vol * (mu * np.sum((S - eye) ** 2, axis=(1, 2)) + 0.5 * lam * tr**2)
    P = 2.0 * mu[:, None, None] * (F - R) + (lam * tr)[:, None, None] * R
    forces = vol[:, None, None] * np.einsum("eij,eaj->eai", P, grads)
    return energy, forces


def element_stiffness(F, vol, grads, mu, lam):
    """Consistent tangent of the corotational element, (ne, 12, 12).

    The rotation derivative comes from the polar decomposition identity
    R^T dF - dF^T R = W S + S W with W = R^T dR skew, solved through
    (tr(S) I - S) w = axial(R^T dF - dF^T R).
    """
    R, S = _polar(F)
    ne = len(F)
    eye = np.eye(3)
    trS = np.trace(S, axis1=1, axis2=2)
    Minv = np.linalg.inv(trS[:, None, None] * eye - S)
    coef = lam * (trS - 3.0) - 2.0 * mu
    C = np.empty((ne, 3, 3, 3, 3))
    for k in range(3):
        for l in range(3):
            dF = np.zeros((3, 3))
            dF[k, l] = 1.0
            A = np.einsum("eji,jk->eik", R, dF)
            A = A - np.transpose(A, (0, 2, 1))
            a = np.stack([A[:, 2, 1], A[:, 0, 2], A[:, 1, 0]], axis=1)
            w = np.einsum("eij,ej->ei", Minv, a)
            dR = R @ _skew(w)
            dP = 2.0 * mu[:, None, None] * dF + coef[:, None, None] * dR
            dP += (lam * R[:, k, l])[:, None, None] * R
            C[:, :, :, k, l] = dP
    CG = np.einsum("eijkl,ebl->eijkb", C, grads)
    Ke = np.einsum("eaj,eijkb->eaibk", grads, CG) * vol[:, None, None, None, None]
    Ke = Ke.reshape(ne, 12, 12)
    return 0.5 * (Ke + np.transpose(Ke, (0, 2, 1)))


def project_psd(Ke: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(Ke)
    return np.einsum("eij,ej,ekj->eik", V, np.maximum(w, 0.0), V)


# ------------------------------------------------------------------ factorization

class Factorization:
    """Sparse symmetric factorization of an SPD matrix.

    SuperLU with a symmetric (A + A^T) fill-reducing ordering and no
    pivoting, which amounts to an LDL^T; a non-positive pivot means the
    matrix is not positive definite.
    """

    def __init__(self, K: sp.spmatrix):
        try:
            self._lu = spla.splu(
                sp.csc_matrix(K),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise FactorizationError(f"sparse factorization failed: {exc}") from exc
        pivots = self._lu.U.diagonal()
        if not np.all(np.isfinite(pivots)) or np.any(pivots <= 0.0):
            raise FactorizationError(
                f"tangent stiffness is not positive definite (min pivot {pivots.min():.3e})"
            )
        self.n = K.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))


# ------------------------------------------------------------------------- system

class FemSystem:
    """Quasi-static FEM state of one robot.

    Holds the current node positions ``x`` (n, 3), the applied cable forces
    ``lam`` and any additional nodal loads ``loads`` (n, 3) on top of gravity.
    """

    def __init__(self, model, tol_newton: float = TOL_NEWTON, max_iters: int = MAX_ITERS):
        self.model = model
        mesh = model.mesh
        self.tets = mesh.tets
        self.n = mesh.n_nodes
        self.vol, self.grads = shape_gradients(mesh.rest_nodes, mesh.tets)
        self.mu, self.lam_lame = lame(model.young_per_element(), model.poisson_per_element())
        self.fixed = np.asarray(model.fixed_dofs, dtype=bool).ravel()
        self.free = np.flatnonzero(~self.fixed)
        self._free_index = -np.ones(3 * self.n, dtype=np.int64)
        self._free_index[self.free] = np.arange(len(self.free))
        self.tol_newton = tol_newton
        self.max_iters = max_iters
        self.x = mesh.rest_nodes.copy()
        self.lam = np.zeros(len(model.cables))
        self.loads = np.zeros((self.n, 3))
        self.gravity_force = self._lumped_gravity()
        self.last_iters = 0
        self.last_residual = 0.0
        # assembly pattern for the free block
        dofs = (3 * self.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        self._rows = np.repeat(dofs, 12, axis=1).ravel()
        self._cols = np.tile(dofs, (1, 12)).ravel()
        fr, fc = self._free_index[self._rows], self._free_index[self._cols]
        self._keep = (fr >= 0) & (fc >= 0)
        self._frows, self._fcols = fr[self._keep], fc[self._keep]

    # -------------------------------------------------------------- basic state
    def clone(self) -> "FemSystem":
        other = object.__new__(FemSystem)
        other.__dict__.update(self.__dict__)
        other.x = self.x.copy()
        other.lam = self.lam.copy()
        other.loads = self.loads.copy()
        return other

    def _lumped_gravity(self) -> np.ndarray:
        g = np.asarray(self.model.gravity, dtype=float)
        f = np.zeros((self.n, 3))
        rho = self.model.material.density
        if rho == 0.0 or not np.any(g):
            return f
        share = (rho * self.vol / 4.0)[:, None] * g[None, :]
        for a in range(4):
            np.add.at(f, self.tets[:, a], share)
        return f

    @property
    def f_ext(self) -> np.ndarray:
        return self.gravity_force + self.loads

    @property
    def rest_nodes(self) -> np.ndarray:
        return self.model.mesh.rest_nodes

    def reset(self) -> None:
        self.x = self.rest_nodes.copy()
        self.lam = np.zeros_like(self.lam)
        self.loads = np.zeros_like(self.loads)

    # ------------------------------------------------------------- assembly
    def energy(self, x=None) -> float:
        x = self.x if x is None else x
        F = deformation_gradient(x, self.tets, self.grads)
        e, _ = element_energy_forces(F, self.vol, self.grads, self.mu, self.lam_lame)
        return float(e.sum())

    def internal_forces(self, x=None) -> np.ndarray:
        x = self.x if x is None else x
        F = deformation_gradient(x, self.tets, self.grads)
        _, fe = element_energy_forces(F, self.vol, self.grads, self.mu, self.lam_lame)
        f = np.zeros((self.n, 3))
        for a in range(4):
            np.add.at(f, self.tets[:, a], fe[:, a])
        return f

    def element_stiffness(self, x=None, project: bool = False) -> np.ndarray:
        x = self.x if x is None else x
        F = deformation_gradient(x, self.tets, self.grads)
        Ke = element_stiffness(F, self.vol, self.grads, self.mu, self.lam_lame)
        return project_psd(Ke) if project else Ke

    def stiffness(self, x=None, project: bool = False) -> sp.csr_matrix:
        """Material tangent over all 3n DOFs, no Dirichlet treatment."""
        Ke = self.element_stiffness(x, project)
        return sp.csr_matrix((Ke.ravel(), (self._rows, self._cols)), shape=(3 * self.n, 3 * self.n))

    def assemble(self, x=None):
        """K and f_int at ``x``; fixed rows/cols of K replaced by identity."""
        K = self.stiffness(x).tolil()
        fixed = np.flatnonzero(self.fixed)
        K[fixed, :] = 0.0
        K[:, fixed] = 0.0
        K[fixed, fixed] = 1.0
        return K.tocsr(), self.internal_forces(x)

    def tangent_free(self, x=None, lam=None, project: bool = False) -> sp.csc_matrix:
        """Tangent of the full residual on free DOFs: material + cable geometric stiffness."""
        x = self.x if x is None else x
        lam = self.lam if lam is None else lam
        Ke = self.element_stiffness(x, project).ravel()[self._keep]
        rows, cols, vals = [self._frows], [self._fcols], [Ke]
        from .constraints import cable_hessian_triplets

        for cable, t in zip(self.model.cables, lam):
            if t == 0.0:
                continue
            r, c, v = cable_hessian_triplets(x, cable)
            fr, fc = self._free_index[r], self._free_index[c]
            keep = (fr >= 0) & (fc >= 0)
            rows.append(fr[keep])
            cols.append(fc[keep])
            vals.append(t * v[keep])
        m = len(self.free)
        return sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
        )

    def factorize(self, x=None, lam=None) -> Factorization:
        try:
            return Factorization(self.tangent_free(x, lam))
        except FactorizationError:
            log.debug("exact tangent indefinite, falling back to PSD-projected element stiffness")
            return Factorization(self.tangent_free(x, lam, project=True))

    # -------------------------------------------------------------- residuals
    def actuation_force(self, x=None, lam=None) -> np.ndarray:
        """H_a^T lam as an (n, 3) nodal force."""
        from .constraints import cable_length_gradient

        x = self.x if x is None else x
        lam = self.lam if lam is None else lam
        f = np.zeros((self.n, 3))
        for cable, t in zip(self.model.cables, lam):
            if t != 0.0:
                f -= t * cable_length_gradient(x, cable, self.n)
        return f

    def potential(self, x=None, lam=None) -> float:
        """Total potential whose negative gradient is the residual."""
        from .constraints import cable_pull_in

        x = self.x if x is None else x
        lam = self.lam if lam is None else lam
        work = float(np.sum(self.f_ext[~self.model.fixed_dofs] * x[~self.model.fixed_dofs]))
        work += sum(t * cable_pull_in(x, c) for c, t in zip(self.model.cables, lam) if t != 0.0)
        return self.energy(x) - work

    def residual(self, x=None, lam=None) -> np.ndarray:
        """f_ext - f_int + H_a^T lam, flattened; fixed DOFs zeroed."""
        x = self.x if x is None else x
        r = (self.f_ext - self.internal_forces(x) + self.actuation_force(x, lam)).ravel()
        r[self.fixed] = 0.0
        return r

    def force_scale(self, lam=None) -> float:
        act = self.actuation_force(self.x, lam).ravel()[self.free]
        return 1.0 + np.linalg.norm(self.f_ext.ravel()[self.free]) + np.linalg.norm(act)

    # ----------------------------------------------------------------- solves
    def _newton(self, lam: np.ndarray, x0: np.ndarray) -> np.ndarray:
        x = x0.copy()
        try:
            r = self.residual(x, lam)
        except ElementInversionError:
            x = self.x.copy()
            r = self.residual(x, lam)
        scale = 1.0 + np.linalg.norm(self.f_ext.ravel()[self.free])
        scale += np.linalg.norm(self.actuation_force(x, lam).ravel()[self.free])
        rn = np.linalg.norm(r)
        pot = self.potential(x, lam)
        for it in range(self.max_iters + 1):
            if rn <= self.tol_newton * scale:
                self.last_iters, self.last_residual = it, rn
                return x
            if it == self.max_iters:
                break
            fac = self.factorize(x, lam)
            dx = np.zeros(3 * self.n)
            dx[self.free] = fac.solve(r[self.free])
            # halve only when both the residual and the potential increase
            step = 1.0
            while True:
                trial = x + step * dx.reshape(-1, 3)
                try:
                    r_new = self.residual(trial, lam)
                    rn_new = np.linalg.norm(r_new)
                    pot_new = self.potential(trial, lam)
                except ElementInversionError:
                    rn_new = pot_new = np.inf
                if rn_new < rn or pot_new < pot or step < 1e-4:
                    break
                step *= 0.5
            if not np.isfinite(rn_new):
                raise ConvergenceError("Newton line search hit inverted elements", rn)
            x, r, rn, pot = trial, r_new, rn_new, pot_new
        raise ConvergenceError(f"Newton did not converge in {self.max_iters} iterations", rn)

    def solve_free(self) -> np.ndarray:
        """Equilibrium under external loads only; returns the displacement."""
        x_start = self.x.copy()
        lam = np.zeros_like(self.lam)
        self.x = self._newton(lam, self.x)
        self.lam = lam
        return self.x - x_start

    def solve_with_actuation(self, lam, x0=None) -> np.ndarray:
        """Equilibrium with cable tensions ``lam``; cable directions follow x."""
        lam = np.asarray(lam, dtype=float).copy()
        if lam.shape != self.lam.shape:
            raise ValueError(f"expected {len(self.lam)} actuator forces, got {lam.shape}")
        for cable, t in zip(self.model.cables, lam):
            lo, hi = cable.lambda_bounds
            if not (lo - 1e-9 * max(1.0, abs(hi)) <= t <= hi + 1e-9 * max(1.0, abs(hi))):
                raise ValueError(f"cable force {t} outside bounds {cable.lambda_bounds}")
        x0 = self.x if x0 is None else x0
        self.x = self._newton(lam, x0)
        self.lam = lam
        return self.x

    def solve_with_displacement(self, s, max_ramp: float = 5.0, depth: int = 0) -> np.ndarray:
        """Equilibrium with imposed cable pull-in ``s``.

        Cables are unilateral: a cable only carries tension when the body
        would otherwise pull it out beyond its motor position (delta_a < s).
        Large changes of ``s`` are ramped in increments of ``max_ramp``.
        Returns the cable tensions at equilibrium.
        """
        from .constraints import cable_pull_in

        s = np.asarray(s, dtype=float)
        cur = np.array([cable_pull_in(self.x, c) for c in self.model.cables])
        start = cur
        gap = np.max(np.abs(s - start)) if len(s) else 0.0
        n_ramp = max(1, int(np.ceil(gap / max_ramp)))
        x_save, lam_save = self.x.copy(), self.lam.copy()
        try:
            for k in range(1, n_ramp + 1):
                target = start + (s - start) * (k / n_ramp)
                self._displacement_newton(target)
        except (ConvergenceError, ElementInversionError, FactorizationError):
            self.x, self.lam = x_save, lam_save
            if depth >= 3:
                raise
            return self.solve_with_displacement(s, max_ramp / 4.0, depth + 1)
        return self.lam.copy()

    def _displacement_newton(self, s: np.ndarray) -> None:
        from .constraints import cable_pull_in, cable_length_gradient

        cables = self.model.cables
        m = len(cables)
        x = self.x.copy()
        lam = self.lam.copy()
        pull = np.array([cable_pull_in(x, c) for c in cables])
        active = (lam > 0.0) | (pull < s)
        length_scale = 1.0 + float(np.max(np.abs(s))) if m else 1.0
        rn = np.inf
        just_released = False
        for it in range(self.max_iters):
            r = self.residual(x, lam)
            pull = np.array([cable_pull_in(x, c) for c in cables])
            gap = np.where(active, s - pull, 0.0)
            scale = 1.0 + np.linalg.norm(self.f_ext.ravel()[self.free])
            scale += np.linalg.norm(self.actuation_force(x, lam).ravel()[self.free])
            rn = np.linalg.norm(r)
            violated = (~active) & (pull < s - self.tol_newton * length_scale)
            log.debug("disp-newton it %d |r| %.3e active %s lam %s gap %s", it, rn, active, lam, s - pull)
            if (
                rn <= self.tol_newton * scale
                and np.all(np.abs(gap) <= self.tol_newton * length_scale)
                and not violated.any()
            ):
                self.x, self.lam = x, np.maximum(lam, 0.0)
                self.last_iters, self.last_residual = it, rn
                return
            if violated.any() and not just_released:
                active |= violated
            just_released = False
            fac = self.factorize(x, lam)
            z = np.zeros(3 * self.n)
            z[self.free] = fac.solve(r[self.free])
            idx = np.flatnonzero(active)
            dlam = np.zeros(m)
            dx = z
            if len(idx):
                Ha = np.stack([-cable_length_gradient(x, cables[i], self.n).ravel() for i in idx])
                Y = np.zeros((3 * self.n, len(idx)))
                Y[self.free] = fac.solve(Ha[:, self.free].T).reshape(len(self.free), len(idx))
                Waa = Ha @ Y
                rhs = s[idx] - pull[idx] - Ha @ z
                dlam[idx] = np.linalg.solve(Waa, rhs)
                dx = z + Y @ dlam[idx]
            new_lam = lam + dlam
            # tiny negative forces on a degenerate contact are tolerated, not released
            lam_tol = self.tol_newton * (1.0 + float(np.max(np.abs(new_lam), initial=0.0)))
            released = active & (new_lam < -lam_tol)
            if released.any():
                # drop the cable that goes most negative and redo the step
                worst = int(np.argmin(np.where(released, new_lam, np.inf)))
                active[worst] = False
                lam = lam.copy()
                lam[worst] = 0.0
                just_released = True
                continue
            step = 1.0
            while True:
                trial = x + step * dx.reshape(-1, 3)
                try:
                    self.internal_forces(trial)
                    break
                except ElementInversionError:
                    step *= 0.5
                    if step < 1e-4:
                        raise
            x = trial
            lam = lam + step * dlam
        raise ConvergenceError("displacement-controlled Newton did not converge", rn)
