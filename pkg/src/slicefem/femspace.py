"""Compatible finite element spaces on extruded quadrilateral meshes.

Four spaces are provided:

``velocity_rt1``
    Next-to-lowest-order Raviart-Thomas space.  The x component is quadratic
    in ``xi`` and linear in ``zeta``, the z component the other way round.
    Degrees of freedom are moments of the reference normal component
    (``u_x`` on vertical facets, ``u_z`` on horizontal facets) against
    ``{1, s}`` on each facet, plus interior moments of ``u_x`` against
    ``{1, zeta}`` and of ``u_z`` against ``{1, xi}``.  Normals are taken in the
    +xi / +zeta directions, so every orientation sign is +1 on these meshes.
``density_dgq1``
    Discontinuous bilinears with nodes at the cell corners.
``y_velocity_dgq1``
    Same element, used for the out-of-plane velocity.
``theta_space``
    Linear in the horizontal, quadratic in the vertical; continuous across
    horizontal facets and discontinuous across vertical ones.

Local RT1 dof order: 0-1 left facet, 2-3 right, 4-5 bottom, 6-7 top,
8-9 interior x component, 10-11 interior z component.
Scalar local dofs are ``iz * 2 + ix`` for nodes at
``xi in {-1, 1}`` and ``zeta`` in ``{-1, 1}`` (Q1) or ``{-1, 0, 1}`` (theta).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable
import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ExtrudedMesh, CellGeometry

__all__ = [
    "QuadratureRule",
    "gauss_rule",
    "ReferenceBasis",
    "reference_basis",
    "DofMap",
    "build_dofmap",
    "Field",
    "FunctionSpace",
    "piola_map",
    "project",
    "locate_points",
    "SPACES",
    "DEFAULT_QUAD_DEGREE",
]

SPACES = ("velocity_rt1", "density_dgq1", "theta_space", "y_velocity_dgq1")
DEFAULT_QUAD_DEGREE = 6


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.weights)


def gauss_rule(cell_or_facet: str, degree: int) -> QuadratureRule:
    """Tensor Gauss-Legendre rule exact to ``degree`` in each direction.

    ``cell_or_facet`` is ``"interval"`` (facets, points shape ``(n,)``) or
    ``"square"`` (cells, points shape ``(n*n, 2)`` ordered with ``xi`` fastest).
    """
    if degree < 1:
        raise ValueError("quadrature degree must be >= 1")
    n = int(math.ceil((degree + 1) / 2))
    x, w = np.polynomial.legendre.leggauss(n)
    if cell_or_facet == "interval":
        return QuadratureRule(x, w)
    if cell_or_facet == "square":
        xi, ze = np.meshgrid(x, x, indexing="xy")
        wx, wz = np.meshgrid(w, w, indexing="xy")
        pts = np.stack([xi.ravel(), ze.ravel()], axis=1)
        return QuadratureRule(pts, (wx * wz).ravel())
    raise ValueError(f"unknown reference domain {cell_or_facet!r}")


# ---------------------------------------------------------------------------
# 1D polynomial families
# ---------------------------------------------------------------------------
def _dual_basis(functionals: np.ndarray) -> np.ndarray:
    """Monomial coefficients of the basis dual to the given functionals.

    ``functionals[i, m]`` is functional ``i`` applied to ``t**m``.
    Returns ``C`` with ``C[j, m]`` the coefficient of ``t**m`` in basis ``j``.
    """
    return np.linalg.inv(functionals).T


def _moment_rows(npoly: int, nmom: int) -> np.ndarray:
    # integral of t**m * t**k over [-1, 1]
    rows = np.zeros((nmom, npoly))
    for k in range(nmom):
        for m in range(npoly):
            p = m + k
            rows[k, m] = 0.0 if p % 2 else 2.0 / (p + 1)
    return rows


def _eval_rows(points, npoly: int) -> np.ndarray:
    return np.array([[t ** m for m in range(npoly)] for t in points], dtype=float)


# quadratic, dual to {value at -1, value at +1, integral}
_RT_NORMAL = _dual_basis(np.vstack([_eval_rows([-1.0, 1.0], 3), _moment_rows(3, 1)]))
# linear, dual to {integral, integral against t}
_RT_TANGENT = _dual_basis(_moment_rows(2, 2))
_LAGRANGE1 = _dual_basis(_eval_rows([-1.0, 1.0], 2))
_LAGRANGE2 = _dual_basis(_eval_rows([-1.0, 0.0, 1.0], 3))


def _poly(coeffs: np.ndarray, t: np.ndarray, deriv: int = 0) -> np.ndarray:
    """Evaluate every polynomial row of ``coeffs`` at ``t``; shape (len(t), nbasis)."""
    c = np.asarray(coeffs, dtype=float)
    for _ in range(deriv):
        c = c[:, 1:] * np.arange(1, c.shape[1])[None, :]
    if c.shape[1] == 0:
        return np.zeros((len(np.atleast_1d(t)), coeffs.shape[0]))
    return np.polynomial.polynomial.polyval(np.asarray(t, dtype=float), c.T).T


# ---------------------------------------------------------------------------
# reference bases
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ReferenceBasis:
    space_tag: str
    num_dofs_per_cell: int
    is_vector: bool
    nodes: np.ndarray | None = field(default=None, repr=False)

    def tabulate(self, points):
        """Basis values and reference gradients at reference points.

        Returns ``(values, grads)``.  Scalar spaces give shapes
        ``(npts, ndofs)`` and ``(npts, ndofs, 2)``; the vector space gives
        ``(npts, ndofs, 2)`` and ``(npts, ndofs, 2, 2)`` with gradient index
        ``[component, reference direction]``.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xi, ze = pts[:, 0], pts[:, 1]
        if self.space_tag == "velocity_rt1":
            return _tabulate_rt1(xi, ze)
        if self.space_tag == "theta_space":
            return _tabulate_scalar(xi, ze, _LAGRANGE1, _LAGRANGE2)
        return _tabulate_scalar(xi, ze, _LAGRANGE1, _LAGRANGE1)


def _tabulate_scalar(xi, ze, cx, cz):
    px, dpx = _poly(cx, xi), _poly(cx, xi, 1)
    pz, dpz = _poly(cz, ze), _poly(cz, ze, 1)
    nx, nz = cx.shape[0], cz.shape[0]
    # local index iz * nx + ix
    vals = (pz[:, :, None] * px[:, None, :]).reshape(len(xi), nz * nx)
    gx = (pz[:, :, None] * dpx[:, None, :]).reshape(len(xi), nz * nx)
    gz = (dpz[:, :, None] * px[:, None, :]).reshape(len(xi), nz * nx)
    return vals, np.stack([gx, gz], axis=-1)


# (normal-polynomial index, tangential-polynomial index) per local dof
_RT_X_DOFS = {0: (0, 0), 1: (0, 1), 2: (1, 0), 3: (1, 1), 8: (2, 0), 9: (2, 1)}
_RT_Z_DOFS = {4: (0, 0), 5: (0, 1), 6: (1, 0), 7: (1, 1), 10: (2, 0), 11: (2, 1)}


def _tabulate_rt1(xi, ze):
    n = len(xi)
    vals = np.zeros((n, 12, 2))
    grads = np.zeros((n, 12, 2, 2))
    Nx, dNx = _poly(_RT_NORMAL, xi), _poly(_RT_NORMAL, xi, 1)
    Tz, dTz = _poly(_RT_TANGENT, ze), _poly(_RT_TANGENT, ze, 1)
    Nz, dNz = _poly(_RT_NORMAL, ze), _poly(_RT_NORMAL, ze, 1)
    Tx, dTx = _poly(_RT_TANGENT, xi), _poly(_RT_TANGENT, xi, 1)
    for d, (a, b) in _RT_X_DOFS.items():
        vals[:, d, 0] = Nx[:, a] * Tz[:, b]
        grads[:, d, 0, 0] = dNx[:, a] * Tz[:, b]
        grads[:, d, 0, 1] = Nx[:, a] * dTz[:, b]
    for d, (a, b) in _RT_Z_DOFS.items():
        vals[:, d, 1] = Nz[:, a] * Tx[:, b]
        grads[:, d, 1, 0] = Nz[:, a] * dTx[:, b]
        grads[:, d, 1, 1] = dNz[:, a] * Tx[:, b]
    return vals, grads


def _scalar_nodes(nz: int) -> np.ndarray:
    zs = [-1.0, 1.0] if nz == 2 else [-1.0, 0.0, 1.0]
    return np.array([(x, z) for z in zs for x in (-1.0, 1.0)])


def reference_basis(space_tag: str) -> ReferenceBasis:
    if space_tag == "velocity_rt1":
        return ReferenceBasis(space_tag, 12, True)
    if space_tag == "theta_space":
        return ReferenceBasis(space_tag, 6, False, _scalar_nodes(3))
    if space_tag in ("density_dgq1", "y_velocity_dgq1"):
        return ReferenceBasis(space_tag, 4, False, _scalar_nodes(2))
    raise ValueError(f"unknown space {space_tag!r}")


def piola_map(geom: CellGeometry, ref_values) -> np.ndarray:
    """Contravariant Piola map ``J u_ref / det J`` of reference vectors."""
    ref = np.asarray(ref_values, dtype=float)
    return ref @ np.asarray(geom.jacobian).T / geom.det_jacobian


# ---------------------------------------------------------------------------
# dof maps
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class DofMap:
    space_tag: str
    cell_to_global: np.ndarray = field(repr=False)
    signs: np.ndarray = field(repr=False)
    num_global: int
    constrained: np.ndarray = field(repr=False)

    @property
    def unconstrained(self) -> np.ndarray:
        mask = np.ones(self.num_global, dtype=bool)
        mask[self.constrained] = False
        return np.nonzero(mask)[0]


def build_dofmap(space_tag: str, mesh: ExtrudedMesh) -> DofMap:
    """Global numbering for one space; see the module docstring for layouts."""
    nc, nl = mesh.ncols, mesh.nlayers
    cells = np.arange(mesh.num_cells)
    col, lay = cells // nl, cells % nl
    empty = np.zeros(0, dtype=np.int64)
    if space_tag in ("density_dgq1", "y_velocity_dgq1"):
        c2g = cells[:, None] * 4 + np.arange(4)[None, :]
        return DofMap(space_tag, c2g, np.ones_like(c2g, dtype=float), 4 * mesh.num_cells, empty)
    if space_tag == "theta_space":
        # global index: (column * (2 nl + 1) + vertical node) * 2 + horizontal node
        mz = 2 * lay[:, None] + np.array([0, 0, 1, 1, 2, 2])[None, :]
        hx = np.array([0, 1, 0, 1, 0, 1])[None, :]
        c2g = (col[:, None] * (2 * nl + 1) + mz) * 2 + hx
        return DofMap(space_tag, c2g, np.ones_like(c2g, dtype=float), nc * (2 * nl + 1) * 2, empty)
    if space_tag == "velocity_rt1":
        nv = 2 * nc * nl
        nh = 2 * nc * (nl + 1)

        def vfacet(line, layer):
            return 2 * (line * nl + layer)

        def hfacet(column, level):
            return nv + 2 * (column * (nl + 1) + level)

        left = vfacet(col, lay)
        right = vfacet((col + 1) % nc, lay)
        bottom = hfacet(col, lay)
        top = hfacet(col, lay + 1)
        interior = nv + nh + 4 * cells
        c2g = np.stack(
            [left, left + 1, right, right + 1, bottom, bottom + 1, top, top + 1,
             interior, interior + 1, interior + 2, interior + 3], axis=1)
        levels = np.concatenate([hfacet(np.arange(nc), 0), hfacet(np.arange(nc), nl)])
        constrained = np.sort(np.concatenate([levels, levels + 1]))
        return DofMap(space_tag, c2g, np.ones_like(c2g, dtype=float), nv + nh + 4 * mesh.num_cells, constrained)
    raise ValueError(f"unknown space {space_tag!r}")


@dataclass(eq=False)
class Field:
    space_tag: str
    coefficients: np.ndarray

    def copy(self) -> "Field":
        return Field(self.space_tag, self.coefficients.copy())


# ---------------------------------------------------------------------------
# physical tabulation
# ---------------------------------------------------------------------------
def physical_tables(mesh: ExtrudedMesh, basis: ReferenceBasis, cells, ref_points):
    """Physical basis values and gradients on the given cells.

    ``ref_points`` is ``(np, 2)`` (shared) or ``(nc, np, 2)`` (per cell).
    Returns ``values, grads, x, z, detJ`` where for the vector space
    ``values`` has shape ``(nc, np, nb, 2)`` and ``grads`` ``(nc, np, nb, 2, 2)``
    indexed ``[component, physical direction]``; scalar spaces drop the
    component axis.
    """
    cells = np.atleast_1d(np.asarray(cells))
    x, z, J, dJ = mesh.map_points(cells, ref_points)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if np.any(det <= 0):
        bad = cells[np.nonzero(np.any(det <= 0, axis=-1))[0][0]]
        raise ValueError(f"degenerate cell {int(bad)}: det J <= 0")
    Jinv = np.empty_like(J)
    Jinv[..., 0, 0] = J[..., 1, 1] / det
    Jinv[..., 0, 1] = -J[..., 0, 1] / det
    Jinv[..., 1, 0] = -J[..., 1, 0] / det
    Jinv[..., 1, 1] = J[..., 0, 0] / det
    rp = np.asarray(ref_points, dtype=float)
    if rp.ndim == 2:
        rv, rg = basis.tabulate(rp)
        rv, rg = rv[None], rg[None]
    else:
        tabs = [basis.tabulate(p) for p in rp]
        rv = np.stack([t[0] for t in tabs])
        rg = np.stack([t[1] for t in tabs])
    if not basis.is_vector:
        vals = np.broadcast_to(rv, x.shape + rv.shape[2:]).copy()
        grads = np.einsum("cpbk,cpkm->cpbm", np.broadcast_to(rg, x.shape + rg.shape[2:]), Jinv)
        return vals, grads, x, z, det
    # Piola: u = J u_ref / det
    ddet = (dJ[..., 0, 0, :] * J[..., 1, 1, None] + J[..., 0, 0, None] * dJ[..., 1, 1, :]
            - dJ[..., 0, 1, :] * J[..., 1, 0, None] - J[..., 0, 1, None] * dJ[..., 1, 0, :])
    rv = np.broadcast_to(rv, x.shape + rv.shape[2:])
    rg = np.broadcast_to(rg, x.shape + rg.shape[2:])
    vals = np.einsum("cpia,cpba->cpbi", J, rv) / det[..., None, None]
    # d_k u_i in reference directions
    du = (np.einsum("cpiak,cpba->cpbik", dJ, rv) + np.einsum("cpia,cpbak->cpbik", J, rg)) / det[..., None, None, None]
    du -= vals[..., None] * (ddet / det[..., None])[:, :, None, None, :]
    grads = np.einsum("cpbik,cpkm->cpbim", du, Jinv)
    return vals, grads, x, z, det


def locate_points(mesh: ExtrudedMesh, x, z, clamp: bool = True):
    """Find cells and reference coordinates of physical points.

    Points are wrapped periodically in x.  Points above or below the domain
    are clamped to the nearest cell with a warning when ``clamp`` is true.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    s = np.mod((x - mesh.x_offset) / mesh.dx, mesh.ncols)
    col = np.minimum(np.floor(s).astype(int), mesh.ncols - 1)
    frac = s - col
    xi = 2.0 * frac - 1.0
    right = (col + 1) % mesh.ncols
    levels = (1.0 - frac)[:, None] * mesh.vertex_z[col] + frac[:, None] * mesh.vertex_z[right]
    outside = (z < levels[:, 0] - 1e-9 * mesh.H) | (z > levels[:, -1] + 1e-9 * mesh.H)
    if np.any(outside):
        if not clamp:
            raise ValueError("point outside the domain")
        warnings.warn(f"{int(outside.sum())} sample points outside the domain clamped to nearest cell")
    zc = np.clip(z, levels[:, 0], levels[:, -1])
    lay = np.array([np.searchsorted(lv, zz, side="right") - 1 for lv, zz in zip(levels, zc)])
    lay = np.clip(lay, 0, mesh.nlayers - 1)
    zb = levels[np.arange(len(x)), lay]
    zt = levels[np.arange(len(x)), lay + 1]
    ze = 2.0 * (zc - zb) / (zt - zb) - 1.0
    cells = mesh.cell_index(col, lay)
    return cells, np.stack([xi, np.clip(ze, -1.0, 1.0)], axis=-1)


# ---------------------------------------------------------------------------
# function spaces
# ---------------------------------------------------------------------------
class FunctionSpace:
    """A reference basis bound to a mesh and its global numbering."""

    def __init__(self, mesh: ExtrudedMesh, space_tag: str, quad_degree: int = DEFAULT_QUAD_DEGREE):
        self.mesh = mesh
        self.space_tag = space_tag
        self.basis = reference_basis(space_tag)
        self.dofmap = build_dofmap(space_tag, mesh)
        self.quad_degree = quad_degree

    def __repr__(self):
        return f"FunctionSpace({self.space_tag}, ncols={self.mesh.ncols}, nlayers={self.mesh.nlayers})"

    @property
    def dim(self) -> int:
        return self.dofmap.num_global

    def zero(self) -> Field:
        return Field(self.space_tag, np.zeros(self.dim))

    @cached_property
    def quadrature(self) -> QuadratureRule:
        return gauss_rule("square", self.quad_degree)

    @cached_property
    def cell_tables(self):
        """``(values, grads, x, z, weights)`` at the cell quadrature points."""
        q = self.quadrature
        cells = np.arange(self.mesh.num_cells)
        vals, grads, x, z, det = physical_tables(self.mesh, self.basis, cells, q.points)
        return vals, grads, x, z, det * q.weights[None, :]

    @cached_property
    def mass_matrix(self) -> sp.csr_matrix:
        vals, _, _, _, w = self.cell_tables
        if self.basis.is_vector:
            local = np.einsum("cqia,cqja,cq->cij", vals, vals, w)
        else:
            local = np.einsum("cqi,cqj,cq->cij", vals, vals, w)
        return assemble_matrix(self.dofmap.cell_to_global, local, self.dim)

    @cached_property
    def _mass_lu(self):
        M = self.mass_matrix
        if self.dofmap.constrained.size:
            free = self.dofmap.unconstrained
            M = M[free][:, free]
        return spla.splu(M.tocsc())

    def assemble_load(self, values) -> np.ndarray:
        """Load vector ``int f * phi_i`` from values at the cell quadrature points."""
        vals, _, _, _, w = self.cell_tables
        f = np.asarray(values, dtype=float)
        if self.basis.is_vector:
            local = np.einsum("cqia,cqa,cq->ci", vals, f, w)
        else:
            local = np.einsum("cqi,cq,cq->ci", vals, f, w)
        return np.bincount(self.dofmap.cell_to_global.ravel(), local.ravel(), minlength=self.dim)

    def project_values(self, values) -> Field:
        """L2 projection of data given at the cell quadrature points.

        For the velocity space the projection is into the subspace with zero
        normal flux through the top and bottom boundaries.
        """
        b = self.assemble_load(values)
        c = np.zeros(self.dim)
        if self.dofmap.constrained.size:
            free = self.dofmap.unconstrained
            c[free] = self._mass_lu.solve(b[free])
        else:
            c[:] = self._mass_lu.solve(b)
        if not np.all(np.isfinite(c)):
            raise np.linalg.LinAlgError("singular mass matrix block in projection")
        return Field(self.space_tag, c)

    def project(self, expression: Callable) -> Field:
        """L2 projection of ``expression(x, z)``.

        Vector expressions return a pair ``(u_x, u_z)``.
        """
        _, _, x, z, _ = self.cell_tables
        v = expression(x, z)
        if self.basis.is_vector:
            vx, vz = v
            v = np.stack(np.broadcast_arrays(vx, vz, x), axis=-1)[..., :2]
        else:
            v = np.broadcast_to(np.asarray(v, dtype=float), x.shape)
        return self.project_values(v)

    def local(self, coefficients) -> np.ndarray:
        return np.asarray(coefficients)[self.dofmap.cell_to_global]

    def at_quadrature(self, field_or_coeffs, gradient: bool = False):
        """Values (and physical gradients) of a field at the cell quadrature points."""
        c = field_or_coeffs.coefficients if isinstance(field_or_coeffs, Field) else field_or_coeffs
        vals, grads, _, _, _ = self.cell_tables
        loc = self.local(c)
        if self.basis.is_vector:
            v = np.einsum("cqia,ci->cqa", vals, loc)
            return (v, np.einsum("cqiam,ci->cqam", grads, loc)) if gradient else v
        v = np.einsum("cqi,ci->cq", vals, loc)
        return (v, np.einsum("cqim,ci->cqm", grads, loc)) if gradient else v

    def evaluate(self, field_or_coeffs, x, z, clamp: bool = True):
        """Point values of a field at physical points ``(x, z)``."""
        c = field_or_coeffs.coefficients if isinstance(field_or_coeffs, Field) else field_or_coeffs
        cells, ref = locate_points(self.mesh, x, z, clamp=clamp)
        vals, _, _, _, _ = physical_tables(self.mesh, self.basis, cells, ref[:, None, :])
        loc = self.local(c)[cells]
        if self.basis.is_vector:
            return np.einsum("pia,pi->pa", vals[:, 0], loc)
        return np.einsum("pi,pi->p", vals[:, 0], loc)

    @cached_property
    def nodal_points(self):
        """Physical locations of the nodal dofs (scalar spaces), shape (dim, 2)."""
        if self.basis.is_vector:
            raise ValueError("velocity dofs are moments, not point values")
        cells = np.arange(self.mesh.num_cells)
        x, z, _, _ = self.mesh.map_points(cells, self.basis.nodes)
        pts = np.zeros((self.dim, 2))
        g = self.dofmap.cell_to_global
        pts[g.ravel(), 0] = x.ravel()
        pts[g.ravel(), 1] = z.ravel()
        return pts


def assemble_matrix(c2g: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    """Sum local square matrices ``local[c]`` into a global CSR matrix."""
    nb = c2g.shape[1]
    rows = np.repeat(c2g, nb, axis=1)
    cols = np.tile(c2g, (1, nb))
    A = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def project(expression: Callable, space_tag: str, mesh: ExtrudedMesh, quad_degree: int = DEFAULT_QUAD_DEGREE) -> Field:
    """L2 projection of an analytic expression into one of the spaces."""
    return FunctionSpace(mesh, space_tag, quad_degree).project(expression)
