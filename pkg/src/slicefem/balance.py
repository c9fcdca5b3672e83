"""Discrete hydrostatic balance, solved column by column.

For a given potential temperature ``theta_b`` the balanced density makes
the vertical momentum equation at rest hold exactly in the discrete sense.
An auxiliary vertical velocity ``v`` turns the problem into a square
saddle-point system per column; it vanishes at the solution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .femspace import Field, FunctionSpace, DEFAULT_QUAD_DEGREE, gauss_rule, physical_tables
from .forms import PhysicalConstants, exner
from .mesh import ExtrudedMesh

__all__ = [
    "BalanceProblem",
    "BalanceError",
    "ColumnBalance",
    "BalanceSolver",
    "balance_exner_linear",
    "balance_rho_newton",
    "find_top_pi",
]

log = logging.getLogger(__name__)

# local velocity dofs carrying the vertical component
_Z_DOFS = np.array([4, 5, 6, 7, 10, 11])
_BOTTOM_DOFS = np.array([4, 5])
_TOP_DOFS = np.array([6, 7])


class BalanceError(RuntimeError):
    """A column system was singular or Newton failed to converge."""


@dataclass
class BalanceProblem:
    theta_b: Field
    pi_boundary_value: float = 1.0
    boundary_side: str = "bottom"

    def __post_init__(self):
        if self.boundary_side not in ("bottom", "top"):
            raise ValueError("boundary_side must be 'bottom' or 'top'")
        if np.any(self.theta_b.coefficients <= 0):
            raise ValueError("theta_b must be positive")


@dataclass
class ColumnBalance:
    column: int
    rho: np.ndarray      # local density coefficients
    pi_linear: np.ndarray
    v: np.ndarray
    newton_its: int
    residual: float


class BalanceSolver:
    """Column systems for one mesh and set of constants."""

    def __init__(self, mesh: ExtrudedMesh, constants: PhysicalConstants | None = None,
                 quad_degree: int = DEFAULT_QUAD_DEGREE, tol: float = 1e-12, max_its: int = 20):
        self.mesh = mesh
        self.constants = constants if constants is not None else PhysicalConstants()
        self.V1 = FunctionSpace(mesh, "velocity_rt1", quad_degree)
        self.V2 = FunctionSpace(mesh, "density_dgq1", quad_degree)
        self.Vt = FunctionSpace(mesh, "theta_space", quad_degree)
        self.tol = tol
        self.max_its = max_its
        qf = gauss_rule("interval", quad_degree)
        self._facet_rule = qf

    # -- column data -------------------------------------------------------
    def _column(self, col: int, side: str):
        mesh = self.mesh
        nl = mesh.nlayers
        cells = col * nl + np.arange(nl)
        g1 = self.V1.dofmap.cell_to_global[cells][:, _Z_DOFS]
        excluded_cell = nl - 1 if side == "bottom" else 0
        excluded_local = _TOP_DOFS if side == "bottom" else _BOTTOM_DOFS
        drop = set(self.V1.dofmap.cell_to_global[cells[excluded_cell], excluded_local].tolist())
        vdofs = np.array(sorted(set(g1.ravel().tolist()) - drop))
        g2 = self.V2.dofmap.cell_to_global[cells]
        rdofs = np.unique(g2.ravel())
        return cells, vdofs, rdofs

    def _assemble(self, col: int, theta: np.ndarray, side: str):
        cells, vdofs, rdofs = self._column(col, side)
        c = self.constants
        vals1, grads1, _, _, w = self.V1.cell_tables
        vals2 = self.V2.cell_tables[0]
        valst, gradst = self.Vt.cell_tables[0], self.Vt.cell_tables[1]
        vals1, grads1, w = vals1[cells], grads1[cells], w[cells]
        vals2 = vals2[cells]
        tloc = theta[self.Vt.dofmap.cell_to_global[cells]]
        th = np.einsum("cqi,ci->cq", valst[cells], tloc)
        dth = np.einsum("cqim,ci->cqm", gradst[cells], tloc)
        div = grads1[..., 0, 0] + grads1[..., 1, 1]
        # d(w theta) = theta div w + w . grad theta, per basis function
        dwt = th[:, :, None] * div + np.einsum("cqia,cqa->cqi", vals1, dth)
        nv, nr = vdofs.size, rdofs.size
        vpos = {g: k for k, g in enumerate(vdofs)}
        rpos = {g: k for k, g in enumerate(rdofs)}
        c2g1 = self.V1.dofmap.cell_to_global[cells]
        c2g2 = self.V2.dofmap.cell_to_global[cells]
        # local-to-column maps (-1 for dropped dofs)
        lv = np.vectorize(lambda g: vpos.get(g, -1))(c2g1)
        lr = np.vectorize(lambda g: rpos[g])(c2g2)
        data = dict(cells=cells, vdofs=vdofs, rdofs=rdofs, lv=lv, lr=lr, w=w,
                    vals1=vals1, vals2=vals2, dwt=dwt, th=th, nv=nv, nr=nr)
        # constant parts
        Mv = np.zeros((nv, nv))
        Mloc = np.einsum("cqia,cqja,cq->cij", vals1, vals1, w)
        Bloc = c.c_p * np.einsum("cqi,cqj,cq->cij", vals2, dwt, w)  # (phi, w)
        grav = c.g * np.einsum("cqi,cq->ci", vals1[..., 1], w)
        B = np.zeros((nr, nv))
        gvec = np.zeros(nv)
        for k in range(len(cells)):
            m = lv[k] >= 0
            iv = lv[k][m]
            Mv[np.ix_(iv, iv)] += Mloc[k][np.ix_(m, m)]
            B[np.ix_(lr[k], iv)] += Bloc[k][:, m]
            np.add.at(gvec, iv, grav[k][m])
        data.update(Mv=Mv, B=B, gvec=gvec)
        data["bvec_unit"] = self._boundary_vector(col, theta, side, lv, cells, nv)
        return data

    def _boundary_vector(self, col, theta, side, lv, cells, nv):
        """Boundary integral of ``c_p w.n theta_b`` for unit boundary Exner."""
        mesh = self.mesh
        qf = self._facet_rule
        k = 0 if side == "bottom" else mesh.nlayers - 1
        cell = cells[k]
        zeta = -1.0 if side == "bottom" else 1.0
        pts = np.stack([qf.points, np.full_like(qf.points, zeta)], axis=1)
        v1, _, _, _, _ = physical_tables(mesh, self.V1.basis, np.array([cell]), pts)
        vt, _, _, _, _ = physical_tables(mesh, self.Vt.basis, np.array([cell]), pts)
        level = 0 if side == "bottom" else mesh.nlayers
        length, normal = mesh.level_facet_geometry(np.array([col]), level)
        n = -normal[0] if side == "bottom" else normal[0]
        th = vt[0] @ theta[self.Vt.dofmap.cell_to_global[cell]]
        wn = v1[0] @ n  # (nq, 12)
        loc = self.constants.c_p * np.einsum("qi,q,q->i", wn, th, 0.5 * length[0] * qf.weights)
        out = np.zeros(nv)
        m = lv[k] >= 0
        np.add.at(out, lv[k][m], loc[m])
        return out

    # -- solves --------------------------------------------------------------
    def linear(self, col: int, theta: np.ndarray, pi0: float, side: str = "bottom", data=None):
        """Linear column solve for ``(Pi_b, v)`` with ``Pi_b`` in the density space."""
        d = data if data is not None else self._assemble(col, theta, side)
        nv, nr = d["nv"], d["nr"]
        K = np.zeros((nv + nr, nv + nr))
        K[:nv, :nv] = d["Mv"]
        K[:nv, nv:] = -d["B"].T
        K[nv:, :nv] = d["B"]
        rhs = np.concatenate([-(d["gvec"] + pi0 * d["bvec_unit"]), np.zeros(nr)])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise BalanceError(f"singular balance system in column {col}") from exc
        return sol[nv:], sol[:nv], d

    def _nonlinear_residual(self, d, v, rho, pi0):
        c = self.constants
        rq = np.einsum("cqi,ci->cq", d["vals2"], rho[d["lr"]])
        Pi, Pr, _ = exner(rq, d["th"], c, derivatives=True)
        nv = d["nv"]
        cells = d["cells"]
        F = np.zeros(nv + d["nr"])
        C = np.zeros((nv, d["nr"]))
        pres = c.c_p * np.einsum("cqi,cq,cq->ci", d["dwt"], Pi, d["w"])
        Cloc = c.c_p * np.einsum("cqi,cq,cqj,cq->cij", d["dwt"], Pr, d["vals2"], d["w"])
        Fv = d["Mv"] @ v + d["gvec"] + pi0 * d["bvec_unit"]
        for k in range(len(cells)):
            m = d["lv"][k] >= 0
            iv = d["lv"][k][m]
            np.add.at(Fv, iv, -pres[k][m])
            C[np.ix_(iv, d["lr"][k])] += Cloc[k][m]
        F[:nv] = Fv
        F[nv:] = d["B"] @ v
        return F, C

    def column(self, col: int, theta: np.ndarray, pi0: float, side: str = "bottom") -> ColumnBalance:
        """Balanced density in one column by Newton from the linear guess."""
        c = self.constants
        d = self._assemble(col, theta, side)
        pi_lin, v, _ = self.linear(col, theta, pi0, side, d)
        k = c.kappa
        # project p0 Pi^((1-kappa)/kappa) / (R theta) into the density space
        vals2, w = d["vals2"], d["w"]
        piq = np.einsum("cqi,ci->cq", vals2, pi_lin[d["lr"]])
        if np.any(piq <= 0):
            raise BalanceError(f"linear Exner solve gave nonpositive values in column {col}")
        target = c.p0 * piq ** ((1.0 - k) / k) / (c.R * d["th"])
        Mloc = np.einsum("cqi,cqj,cq->cij", vals2, vals2, w)
        bloc = np.einsum("cqi,cq,cq->ci", vals2, target, w)
        rho = np.zeros(d["nr"])
        for kk in range(len(d["cells"])):
            rho[d["lr"][kk]] = np.linalg.solve(Mloc[kk], bloc[kk])
        nv = d["nv"]
        scale = max(1.0, np.linalg.norm(d["gvec"]))
        its = 0
        while True:
            F, C = self._nonlinear_residual(d, v, rho, pi0)
            rn = np.linalg.norm(F)
            if rn <= self.tol * scale:
                break
            if its >= self.max_its or not np.isfinite(rn):
                raise BalanceError(f"balance Newton failed in column {col}: residual {rn:.3e}")
            K = np.zeros((nv + d["nr"], nv + d["nr"]))
            K[:nv, :nv] = d["Mv"]
            K[:nv, nv:] = -C
            K[nv:, :nv] = d["B"]
            try:
                delta = np.linalg.solve(K, F)
            except np.linalg.LinAlgError as exc:
                raise BalanceError(f"singular balance Jacobian in column {col}") from exc
            v = v - delta[:nv]
            rho = rho - delta[nv:]
            its += 1
        return ColumnBalance(col, rho, pi_lin, v, its, rn)

    def solve(self, theta_b: Field, pi0: float = 1.0, side: str = "bottom"):
        """Balanced density over the whole mesh; returns ``(Field, list of ColumnBalance)``."""
        theta = theta_b.coefficients
        rho = np.zeros(self.V2.dim)
        results = []
        for col in range(self.mesh.ncols):
            r = self.column(col, theta, pi0, side)
            _, _, rdofs = self._column(col, side)
            rho[rdofs] = r.rho
            results.append(r)
        return Field("density_dgq1", rho), results

    def surface_exner(self, col: int, theta: np.ndarray, pi_top: float, method: str = "nonlinear") -> float:
        """Exner pressure at the bottom centre of a column balanced from the top.

        ``method="nonlinear"`` evaluates ``Pi(rho_b, theta_b)`` from the
        balanced density; ``"linear"`` evaluates the linear Exner solve.
        """
        cell = col * self.mesh.nlayers
        _, _, rdofs = self._column(col, "top")
        loc = np.searchsorted(rdofs, self.V2.dofmap.cell_to_global[cell])
        pt = np.array([[0.0, -1.0]])
        v2, _, _, _, _ = physical_tables(self.mesh, self.V2.basis, np.array([cell]), pt)
        if method == "linear":
            pi, _, _ = self.linear(col, theta, pi_top, "top")
            return float(v2[0, 0] @ pi[loc])
        if method != "nonlinear":
            raise ValueError("method must be 'nonlinear' or 'linear'")
        r = self.column(col, theta, pi_top, "top")
        vt, _, _, _, _ = physical_tables(self.mesh, self.Vt.basis, np.array([cell]), pt)
        rho_s = float(v2[0, 0] @ r.rho[loc])
        th_s = float(vt[0, 0] @ theta[self.Vt.dofmap.cell_to_global[cell]])
        return float(exner(rho_s, th_s, self.constants))


def _solver(mesh, constants, quad_degree=DEFAULT_QUAD_DEGREE) -> BalanceSolver:
    return BalanceSolver(mesh, constants, quad_degree)


def balance_exner_linear(theta_b: Field, pi_boundary_value: float, boundary_side: str, column: int,
                         mesh: ExtrudedMesh, constants: PhysicalConstants | None = None):
    """Linear column solve; returns ``(Pi_b, v, density-space dofs, velocity dofs)``.

    ``Pi_b`` holds density-space coefficients for the column's cells.
    """
    problem = BalanceProblem(theta_b, pi_boundary_value, boundary_side)
    s = _solver(mesh, constants)
    pi, v, d = s.linear(column, problem.theta_b.coefficients, pi_boundary_value, boundary_side)
    return pi, v, d["rdofs"], d["vdofs"]


def balance_rho_newton(theta_b: Field, pi_boundary_value: float, boundary_side: str,
                       mesh: ExtrudedMesh, constants: PhysicalConstants | None = None,
                       return_columns: bool = False):
    """Balanced density for the whole mesh by per-column Newton."""
    problem = BalanceProblem(theta_b, pi_boundary_value, boundary_side)
    rho, cols = _solver(mesh, constants).solve(problem.theta_b, pi_boundary_value, boundary_side)
    return (rho, cols) if return_columns else rho


def find_top_pi(theta_b: Field, target_surface_pi: float, reference_column: int | None,
                mesh: ExtrudedMesh, constants: PhysicalConstants | None = None,
                xtol: float = 1e-13, method: str = "nonlinear") -> float:
    """Top boundary Exner value giving ``target_surface_pi`` at the ground.

    The reference column defaults to the one farthest from ``x = 0``.
    ``method`` selects how the surface value is computed, see
    :meth:`BalanceSolver.surface_exner`.
    """
    s = _solver(mesh, constants)
    theta = theta_b.coefficients
    if reference_column is None:
        xc = mesh.x_offset + (np.arange(mesh.ncols) + 0.5) * mesh.dx
        reference_column = int(np.argmax(np.abs(xc)))
    # first guess from the bottom-up linear solve
    pi_lin, _, _ = s.linear(reference_column, theta, target_surface_pi, "bottom")
    guess = float(np.min(pi_lin))
    if not guess > 0:
        raise BalanceError("nonpositive Exner pressure in the first guess")

    def f(p):
        return s.surface_exner(reference_column, theta, p, method) - target_surface_pi

    lo, hi = 0.9 * guess, min(1.1 * guess, target_surface_pi)
    flo, fhi = f(lo), f(hi)
    for _ in range(20):
        if flo * fhi <= 0:
            break
        if flo > 0:
            lo *= 0.8
            flo = f(lo)
        else:
            hi = hi + 0.5 * (target_surface_pi - hi) + 0.01 * guess
            fhi = f(hi)
    else:
        raise BalanceError("could not bracket the top Exner value")
    return float(brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps))
