"""Residual and Jacobian of the implicit-midpoint compatible discretisation.

Every term is written as a flux: at each quadrature point the integrand is
``sum_a test_a * G_a(F)`` where ``test_a`` runs over basis quantities of the
test function (value components and physical gradient components) and ``F``
collects the same quantities of the midpoint state.  The Jacobian uses the
tangent ``D = dG/dF`` so that a local block is ``sum_q T_X D_XY T_Y^T``.

Quantity layouts
----------------
velocity : ``(u_x, u_z, du_x/dx, du_x/dz, du_z/dx, du_z/dz)``
scalars  : ``(value, d/dx, d/dz)``

Facet quantities stack the plus side before the minus side.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import ExtrudedMesh
from .femspace import FunctionSpace, Field, physical_tables, DEFAULT_QUAD_DEGREE, gauss_rule

__all__ = [
    "PhysicalConstants",
    "ModelParams",
    "State",
    "SliceModel",
    "exner",
    "absorbing_profile",
    "ALL_TERMS",
    "EvaluationError",
]

ALL_TERMS = frozenset({
    "advection", "pressure", "gravity", "coriolis", "damping", "viscosity",
    "transport_rho", "transport_theta", "transport_uy", "stabilisation", "diffusion",
})


class EvaluationError(ValueError):
    """Nonpositive density or potential temperature met during assembly."""


@dataclass(frozen=True)
class PhysicalConstants:
    g: float = 9.810616
    N: float = 0.01
    f: float = 1e-4
    c_p: float = 1004.5
    R: float = 287.0
    p0: float = 1.0e5
    c_v: float = 717.0

    @property
    def kappa(self) -> float:
        return self.R / self.c_p

    def __post_init__(self):
        for name in ("g", "c_p", "R", "p0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class ModelParams:
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    mu_profile: Callable | None = None
    nu: float = 0.0
    theta_diffusivity: float = 0.0
    balance_forcing: tuple = (0.0, 0.0, 0.0)
    eta_penalty: float = 10.0
    C0: float = 2.0 ** -3.5
    y_velocity: bool | None = None
    upwind: bool = True

    def __post_init__(self):
        if self.nu < 0 or self.theta_diffusivity < 0:
            raise ValueError("viscosity and diffusivity must be non-negative")
        if self.eta_penalty <= 0 or self.C0 <= 0:
            raise ValueError("penalty and stabilisation constants must be positive")

    @property
    def has_y_velocity(self) -> bool:
        if self.y_velocity is None:
            return self.constants.f != 0.0
        return bool(self.y_velocity)


def exner(rho, theta, constants: PhysicalConstants, derivatives: bool = False):
    """Exner pressure ``(R rho theta / p0) ** (kappa / (1 - kappa))``.

    With ``derivatives=True`` returns ``(Pi, dPi/drho, dPi/dtheta)``.
    """
    rho = np.asarray(rho, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(rho <= 0) or np.any(theta <= 0):
        raise EvaluationError("exner pressure needs positive density and potential temperature")
    k = constants.kappa
    e = k / (1.0 - k)
    Pi = (constants.R * rho * theta / constants.p0) ** e
    if not derivatives:
        return Pi
    return Pi, e * Pi / rho, e * Pi / theta


def absorbing_profile(z_B: float, H: float, mu_bar: float) -> Callable:
    """Damping coefficient, zero below ``z_B`` and ``mu_bar sin^2`` above."""
    def mu(z):
        z = np.asarray(z, dtype=float)
        s = np.clip((z - z_B) / (H - z_B), 0.0, None)
        return np.where(z < z_B, 0.0, mu_bar * np.sin(0.5 * np.pi * s) ** 2)
    return mu


@dataclass(eq=False)
class State:
    u: Field
    rho: Field
    theta: Field
    u_y: Field | None = None

    def copy(self) -> "State":
        return State(self.u.copy(), self.rho.copy(), self.theta.copy(),
                     None if self.u_y is None else self.u_y.copy())


# ---------------------------------------------------------------------------
# element data
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class _ElementSet:
    """Cells or one family of interior facets, with per-field tables."""

    kind: str
    dofs: dict            # field -> (ne, nloc_field) global indices
    tables: dict          # field -> (ne, nq, nloc_field, nquant)
    weights: np.ndarray   # (ne, nq)
    x: np.ndarray
    z: np.ndarray
    normal: np.ndarray | None = None   # (ne, nq, 2) plus-side normal
    h: np.ndarray | None = None        # (ne,) meshscale
    cells: tuple = ()
    scatter: np.ndarray | None = None  # (ne, nloc, nloc) positions in CSR data

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def _quantities_vector(vals, grads):
    # (e, q, nb, 2), (e, q, nb, 2, 2) -> (e, q, nb, 6)
    e, q, nb = vals.shape[:3]
    return np.concatenate([vals, grads.reshape(e, q, nb, 4)], axis=-1)


def _quantities_scalar(vals, grads):
    return np.concatenate([vals[..., None], grads], axis=-1)


_NQ = {"u": 6, "uy": 3, "rho": 3, "theta": 3}


class SliceModel:
    """Assembles the discrete vertical-slice equations on one mesh.

    The monolithic unknown vector is ordered ``(u | u_y | rho | theta)``;
    ``u_y`` is only present when the model carries the out-of-plane
    velocity.
    """

    def __init__(self, mesh: ExtrudedMesh, params: ModelParams | None = None,
                 quad_degree: int = DEFAULT_QUAD_DEGREE, chunk: int = 1024):
        self.mesh = mesh
        self.params = params if params is not None else ModelParams()
        self.quad_degree = quad_degree
        self.chunk = chunk
        self.spaces = {
            "u": FunctionSpace(mesh, "velocity_rt1", quad_degree),
            "rho": FunctionSpace(mesh, "density_dgq1", quad_degree),
            "theta": FunctionSpace(mesh, "theta_space", quad_degree),
        }
        if self.params.has_y_velocity:
            self.spaces["uy"] = FunctionSpace(mesh, "y_velocity_dgq1", quad_degree)
        self.fields = [f for f in ("u", "uy", "rho", "theta") if f in self.spaces]
        self.offsets = {}
        n = 0
        for f in self.fields:
            self.offsets[f] = n
            n += self.spaces[f].dim
        self.size = n
        self.constrained = self.spaces["u"].dofmap.constrained + self.offsets["u"]
        self._build_elements()

    # -- vectors and states ------------------------------------------------
    def slice(self, name: str) -> slice:
        o = self.offsets[name]
        return slice(o, o + self.spaces[name].dim)

    def state_to_vector(self, state: State) -> np.ndarray:
        x = np.zeros(self.size)
        x[self.slice("u")] = state.u.coefficients
        x[self.slice("rho")] = state.rho.coefficients
        x[self.slice("theta")] = state.theta.coefficients
        if "uy" in self.spaces:
            if state.u_y is not None:
                x[self.slice("uy")] = state.u_y.coefficients
        return x

    def vector_to_state(self, x: np.ndarray) -> State:
        uy = Field("y_velocity_dgq1", x[self.slice("uy")].copy()) if "uy" in self.spaces else None
        return State(Field("velocity_rt1", x[self.slice("u")].copy()),
                     Field("density_dgq1", x[self.slice("rho")].copy()),
                     Field("theta_space", x[self.slice("theta")].copy()), uy)

    def zero_state(self) -> State:
        return self.vector_to_state(np.zeros(self.size))

    # -- setup -------------------------------------------------------------
    def _build_elements(self):
        mesh = self.mesh
        qc = gauss_rule("square", self.quad_degree)
        qf = gauss_rule("interval", self.quad_degree)
        cells = np.arange(mesh.num_cells)
        tables, dofs = {}, {}
        for f in self.fields:
            V = self.spaces[f]
            vals, grads, x, z, det = physical_tables(mesh, V.basis, cells, qc.points)
            tables[f] = (_quantities_vector if f == "u" else _quantities_scalar)(vals, grads)
            dofs[f] = V.dofmap.cell_to_global + self.offsets[f]
        self.cells = _ElementSet("cells", dofs, tables, det * qc.weights[None, :], x, z, cells=(cells,))
        self.mu_cells = self._mu(self.cells.z)

        areas = mesh.cell_areas()
        sets = []
        # vertical interior facets: plus side at xi = +1, minus at xi = -1
        plus, minus, line, layer = mesh.vertical_facets
        pts_p = np.stack([np.ones_like(qf.points), qf.points], axis=1)
        pts_m = np.stack([-np.ones_like(qf.points), qf.points], axis=1)
        length = mesh.vertex_z[line, layer + 1] - mesh.vertex_z[line, layer]
        w = 0.5 * length[:, None] * qf.weights[None, :]
        normal = np.zeros(w.shape + (2,))
        normal[..., 0] = 1.0
        h = 0.5 * (areas[plus] + areas[minus]) / length
        sets.append(self._facet_set("vfacets", plus, minus, pts_p, pts_m, w, normal, h))
        if mesh.nlayers > 1:
            plus, minus, col, level = mesh.horizontal_facets
            pts_p = np.stack([qf.points, np.ones_like(qf.points)], axis=1)
            pts_m = np.stack([qf.points, -np.ones_like(qf.points)], axis=1)
            length, nrm = mesh.level_facet_geometry(col, level)
            w = 0.5 * length[:, None] * qf.weights[None, :]
            normal = np.broadcast_to(nrm[:, None, :], w.shape + (2,)).copy()
            h = 0.5 * (areas[plus] + areas[minus]) / length
            sets.append(self._facet_set("hfacets", plus, minus, pts_p, pts_m, w, normal, h))
        self.facet_sets = sets
        self._build_pattern()

    def _facet_set(self, kind, plus, minus, pts_p, pts_m, w, normal, h):
        tables, dofs = {}, {}
        for f in self.fields:
            V = self.spaces[f]
            conv = _quantities_vector if f == "u" else _quantities_scalar
            vp, gp, xp, zp, _ = physical_tables(self.mesh, V.basis, plus, pts_p)
            vm, gm, xm, zm, _ = physical_tables(self.mesh, V.basis, minus, pts_m)
            tp, tm = conv(vp, gp), conv(vm, gm)
            ne, nq, nb, nqt = tp.shape
            t = np.zeros((ne, nq, 2 * nb, 2 * nqt))
            t[:, :, :nb, :nqt] = tp
            t[:, :, nb:, nqt:] = tm
            tables[f] = t
            g = V.dofmap.cell_to_global + self.offsets[f]
            dofs[f] = np.concatenate([g[plus], g[minus]], axis=1)
        return _ElementSet(kind, dofs, tables, w, xp, zp, normal, h, cells=(plus, minus))

    def _mu(self, z):
        if self.params.mu_profile is None:
            return np.zeros_like(z)
        return np.asarray(self.params.mu_profile(z), dtype=float) * np.ones_like(z)

    def _element_dofs(self, es: _ElementSet) -> np.ndarray:
        return np.concatenate([es.dofs[f] for f in self.fields], axis=1)

    def _build_pattern(self):
        rows, cols = [], []
        for es in [self.cells] + self.facet_sets:
            g = self._element_dofs(es)
            nl = g.shape[1]
            rows.append(np.repeat(g, nl, axis=1).ravel())
            cols.append(np.tile(g, (1, nl)).ravel())
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        keys = np.unique(r.astype(np.int64) * self.size + c)
        self._keys = keys
        indptr = np.searchsorted(keys // self.size, np.arange(self.size + 1))
        self._indptr = indptr
        self._indices = (keys % self.size).astype(np.int32)
        idx_type = np.int32 if keys.size < 2 ** 31 else np.int64
        for es in [self.cells] + self.facet_sets:
            g = self._element_dofs(es)
            nl = g.shape[1]
            k = np.repeat(g, nl, axis=1).astype(np.int64) * self.size + np.tile(g, (1, nl))
            es.scatter = np.searchsorted(keys, k).astype(idx_type).reshape(-1, nl, nl)
        rr = keys // self.size
        cc = keys % self.size
        cmask = np.zeros(self.size, dtype=bool)
        cmask[self.constrained] = True
        self._constrained_entries = np.nonzero(cmask[rr] | cmask[cc])[0]
        self._constrained_diag = np.nonzero(cmask[rr] & (rr == cc))[0]
        # mass matrices for the time terms
        self._mass = {}
        for f in self.fields:
            self._mass[f] = self.spaces[f].mass_matrix

    @property
    def nnz(self) -> int:
        return self._keys.size

    # -- field evaluation --------------------------------------------------
    def _clean(self, x):
        x = np.array(x, dtype=float, copy=True)
        x[self.constrained] = 0.0
        return x

    def _element_quantities(self, es: _ElementSet, x, sl):
        out = {}
        for f in self.fields:
            loc = x[es.dofs[f][sl]]
            out[f] = np.einsum("eqia,ei->eqa", es.tables[f][sl], loc)
        return out

    # -- fluxes --------------------------------------------------------------
    def _cell_flux(self, F, sl, terms, jac):
        p = self.params
        c = p.constants
        U = F["u"]
        ux, uz, gxx, gxz, gzx, gzz = (U[..., k] for k in range(6))
        rho = F["rho"][..., 0]
        th, thx, thz = (F["theta"][..., k] for k in range(3))
        Y = F.get("uy")
        uy = Y[..., 0] if Y is not None else None
        mu = self.mu_cells[sl]
        div = gxx + gzz
        shape = ux.shape
        G = {f: np.zeros(shape + (_NQ[f],)) for f in self.fields}
        D = {}

        def d(a, b):
            key = (a, b)
            if key not in D:
                D[key] = np.zeros(shape + (_NQ[a], _NQ[b]))
            return D[key]

        GU = G["u"]
        if "advection" in terms:
            GU[..., 0] += uz * gzx - ux * gzz
            GU[..., 1] += -uz * gxx + ux * gxz
            GU[..., 2] += 0.5 * (uz * uz - ux * ux)
            GU[..., 3] += -ux * uz
            GU[..., 4] += -ux * uz
            GU[..., 5] += 0.5 * (ux * ux - uz * uz)
            if jac:
                DUU = d("u", "u")
                DUU[..., 0, 0] += -gzz
                DUU[..., 0, 1] += gzx
                DUU[..., 0, 4] += uz
                DUU[..., 0, 5] += -ux
                DUU[..., 1, 0] += gxz
                DUU[..., 1, 1] += -gxx
                DUU[..., 1, 2] += -uz
                DUU[..., 1, 3] += ux
                DUU[..., 2, 0] += -ux
                DUU[..., 2, 1] += uz
                DUU[..., 3, 0] += -uz
                DUU[..., 3, 1] += -ux
                DUU[..., 4, 0] += -uz
                DUU[..., 4, 1] += -ux
                DUU[..., 5, 0] += ux
                DUU[..., 5, 1] += -uz
        if "damping" in terms and np.any(mu):
            GU[..., 1] += mu * uz
            if jac:
                d("u", "u")[..., 1, 1] += mu
        if "gravity" in terms:
            GU[..., 1] += c.g
        if "coriolis" in terms:
            fx, fy, fz = p.balance_forcing
            GU[..., 0] += fx
            GU[..., 1] += fz
            if uy is not None:
                GU[..., 0] += -c.f * uy
                G["uy"][..., 0] += c.f * ux + fy
                if jac:
                    d("u", "uy")[..., 0, 0] += -c.f
                    d("uy", "u")[..., 0, 0] += c.f
        if "viscosity" in terms and p.nu > 0:
            GU[..., 2:6] += p.nu * U[..., 2:6]
            if jac:
                DUU = d("u", "u")
                for k in range(2, 6):
                    DUU[..., k, k] += p.nu
        if "pressure" in terms:
            Pi, Pr, Pt = exner(rho, th, c, derivatives=True)
            cpPi = c.c_p * Pi
            GU[..., 0] += -thx * cpPi
            GU[..., 1] += -thz * cpPi
            GU[..., 2] += -th * cpPi
            GU[..., 5] += -th * cpPi
            if jac:
                DUR = d("u", "rho")
                DUR[..., 0, 0] += -thx * c.c_p * Pr
                DUR[..., 1, 0] += -thz * c.c_p * Pr
                DUR[..., 2, 0] += -th * c.c_p * Pr
                DUR[..., 5, 0] += -th * c.c_p * Pr
                DUT = d("u", "theta")
                DUT[..., 0, 0] += -thx * c.c_p * Pt
                DUT[..., 0, 1] += -cpPi
                DUT[..., 1, 0] += -thz * c.c_p * Pt
                DUT[..., 1, 2] += -cpPi
                DUT[..., 2, 0] += -c.c_p * (Pi + th * Pt)
                DUT[..., 5, 0] += -c.c_p * (Pi + th * Pt)
        if "transport_uy" in terms and uy is not None:
            # advected as a conservative tracer, exactly like the density
            GY = G["uy"]
            GY[..., 1] += -ux * uy
            GY[..., 2] += -uz * uy
            if jac:
                DYU = d("uy", "u")
                DYU[..., 1, 0] += -uy
                DYU[..., 2, 1] += -uy
                DYY = d("uy", "uy")
                DYY[..., 1, 0] += -ux
                DYY[..., 2, 0] += -uz
        if "transport_rho" in terms:
            GR = G["rho"]
            GR[..., 1] += -ux * rho
            GR[..., 2] += -uz * rho
            if jac:
                DRU = d("rho", "u")
                DRU[..., 1, 0] += -rho
                DRU[..., 2, 1] += -rho
                DRR = d("rho", "rho")
                DRR[..., 1, 0] += -ux
                DRR[..., 2, 0] += -uz
        if "transport_theta" in terms:
            GT = G["theta"]
            GT[..., 0] += -th * div
            GT[..., 1] += -ux * th
            GT[..., 2] += -uz * th
            if jac:
                DTU = d("theta", "u")
                DTU[..., 0, 2] += -th
                DTU[..., 0, 5] += -th
                DTU[..., 1, 0] += -th
                DTU[..., 2, 1] += -th
                DTT = d("theta", "theta")
                DTT[..., 0, 0] += -div
                DTT[..., 1, 0] += -ux
                DTT[..., 2, 0] += -uz
        if "diffusion" in terms and p.theta_diffusivity > 0:
            k = p.theta_diffusivity
            G["theta"][..., 1:3] += k * F["theta"][..., 1:3]
            if jac:
                DTT = d("theta", "theta")
                DTT[..., 1, 1] += k
                DTT[..., 2, 2] += k
        return G, D

    def _facet_flux(self, es: _ElementSet, F, sl, terms, jac):
        """Interior facet fluxes; arrays carry plus quantities then minus."""
        p = self.params
        c = p.constants
        vertical = es.kind == "vfacets"
        n = es.normal[sl]
        nx, nz = n[..., 0], n[..., 1]
        h = es.h[sl][:, None]
        U = F["u"]
        Up, Um = U[..., :6], U[..., 6:]
        shape = nx.shape
        G = {f: np.zeros(shape + (2 * _NQ[f],)) for f in self.fields}
        D = {}

        def d(a, b):
            key = (a, b)
            if key not in D:
                D[key] = np.zeros(shape + (2 * _NQ[a], 2 * _NQ[b]))
            return D[key]

        un = 0.5 * ((Up[..., 0] + Um[..., 0]) * nx + (Up[..., 1] + Um[..., 1]) * nz)
        if p.upwind:
            s = (un >= 0.0).astype(float)
        else:
            s = np.full(shape, 0.5)
        sm = 1.0 - s
        # side offsets inside stacked quantity vectors
        oU = (0, 6)

        if "advection" in terms:
            utx = s * Up[..., 0] + sm * Um[..., 0]
            utz = s * Up[..., 1] + sm * Um[..., 1]
            tau = nz * utx - nx * utz
            GU = G["u"]
            GU[..., 0] += Up[..., 1] * tau
            GU[..., 1] += -Up[..., 0] * tau
            GU[..., 6] += -Um[..., 1] * tau
            GU[..., 7] += Um[..., 0] * tau
            if jac:
                DUU = d("u", "u")
                # d tau / d (side value components)
                dtau = {0: (nz * s, -nx * s), 6: (nz * sm, -nx * sm)}
                for row, (cx, sign) in ((0, (1, 1.0)), (1, (0, -1.0)), (6, (1, -1.0)), (7, (0, 1.0))):
                    side = 0 if row < 6 else 6
                    own = Up if side == 0 else Um
                    coeff = sign * own[..., cx]
                    DUU[..., row, side + cx] += sign * tau
                    for o in oU:
                        DUU[..., row, o + 0] += coeff * dtau[o][0]
                        DUU[..., row, o + 1] += coeff * dtau[o][1]

        if "pressure" in terms and vertical:
            rp, rm = F["rho"][..., 0], F["rho"][..., 3]
            tp, tm = F["theta"][..., 0], F["theta"][..., 3]
            Pp, Prp, Ptp = exner(rp, tp, c, derivatives=True)
            Pm, Prm, Ptm = exner(rm, tm, c, derivatives=True)
            Pbar = 0.5 * (Pp + Pm)
            GU = G["u"]
            for i, ni in enumerate((nx, nz)):
                GU[..., i] += ni * tp * c.c_p * Pbar
                GU[..., 6 + i] += -ni * tm * c.c_p * Pbar
            if jac:
                DUT = d("u", "theta")
                DUR = d("u", "rho")
                for i, ni in enumerate((nx, nz)):
                    DUT[..., i, 0] += ni * c.c_p * (Pbar + 0.5 * tp * Ptp)
                    DUT[..., i, 3] += ni * tp * c.c_p * 0.5 * Ptm
                    DUR[..., i, 0] += ni * tp * c.c_p * 0.5 * Prp
                    DUR[..., i, 3] += ni * tp * c.c_p * 0.5 * Prm
                    DUT[..., 6 + i, 3] += -ni * c.c_p * (Pbar + 0.5 * tm * Ptm)
                    DUT[..., 6 + i, 0] += -ni * tm * c.c_p * 0.5 * Ptp
                    DUR[..., 6 + i, 3] += -ni * tm * c.c_p * 0.5 * Prm
                    DUR[..., 6 + i, 0] += -ni * tm * c.c_p * 0.5 * Prp

        def upwind_scalar(name):
            Q = F[name]
            qp, qm = Q[..., 0], Q[..., 3]
            qt = s * qp + sm * qm
            G[name][..., 0] += un * qt
            G[name][..., 3] += -un * qt
            if jac:
                DXX = d(name, name)
                DXX[..., 0, 0] += un * s
                DXX[..., 0, 3] += un * sm
                DXX[..., 3, 0] += -un * s
                DXX[..., 3, 3] += -un * sm
                DXU = d(name, "u")
                for o in oU:
                    DXU[..., 0, o + 0] += 0.5 * qt * nx
                    DXU[..., 0, o + 1] += 0.5 * qt * nz
                    DXU[..., 3, o + 0] += -0.5 * qt * nx
                    DXU[..., 3, o + 1] += -0.5 * qt * nz

        if "transport_rho" in terms:
            upwind_scalar("rho")
        if "transport_uy" in terms and "uy" in self.fields:
            upwind_scalar("uy")
        if "transport_theta" in terms and vertical:
            upwind_scalar("theta")

        if "stabilisation" in terms:
            T = F["theta"]
            jx = T[..., 1] - T[..., 4]
            jz = T[..., 2] - T[..., 5]
            coef = p.C0 * h * h * np.abs(un)
            GT = G["theta"]
            GT[..., 1] += coef * jx
            GT[..., 2] += coef * jz
            GT[..., 4] += -coef * jx
            GT[..., 5] += -coef * jz
            if jac:
                DTT = d("theta", "theta")
                for k in (1, 2):
                    DTT[..., k, k] += coef
                    DTT[..., k, k + 3] += -coef
                    DTT[..., k + 3, k] += -coef
                    DTT[..., k + 3, k + 3] += coef
                sg = p.C0 * h * h * np.sign(un)
                DTU = d("theta", "u")
                for k, jk in ((1, jx), (2, jz)):
                    for o in oU:
                        DTU[..., k, o + 0] += sg * jk * 0.5 * nx
                        DTU[..., k, o + 1] += sg * jk * 0.5 * nz
                        DTU[..., k + 3, o + 0] += -sg * jk * 0.5 * nx
                        DTU[..., k + 3, o + 1] += -sg * jk * 0.5 * nz

        if "viscosity" in terms and p.nu > 0:
            nu = p.nu
            pen = p.eta_penalty / h
            nvec = (nx, nz)
            GU = G["u"]
            for i in range(2):
                ju = Up[..., i] - Um[..., i]
                avg_n = sum(0.5 * (Up[..., 2 + 2 * i + j] + Um[..., 2 + 2 * i + j]) * nvec[j] for j in range(2))
                GU[..., i] += nu * (-avg_n + pen * ju)
                GU[..., 6 + i] += nu * (avg_n - pen * ju)
                for j in range(2):
                    GU[..., 2 + 2 * i + j] += -0.5 * nu * ju * nvec[j]
                    GU[..., 8 + 2 * i + j] += -0.5 * nu * ju * nvec[j]
            if jac:
                DUU = d("u", "u")
                for i in range(2):
                    DUU[..., i, i] += nu * pen
                    DUU[..., i, 6 + i] += -nu * pen
                    DUU[..., 6 + i, i] += -nu * pen
                    DUU[..., 6 + i, 6 + i] += nu * pen
                    for j in range(2):
                        gq = 2 + 2 * i + j
                        for o in oU:
                            DUU[..., i, o + gq] += -0.5 * nu * nvec[j]
                            DUU[..., 6 + i, o + gq] += 0.5 * nu * nvec[j]
                        for o in oU:
                            DUU[..., o + gq, i] += -0.5 * nu * nvec[j]
                            DUU[..., o + gq, 6 + i] += 0.5 * nu * nvec[j]

        if "diffusion" in terms and p.theta_diffusivity > 0:
            k = p.theta_diffusivity
            pen = p.eta_penalty / h
            T = F["theta"]
            jt = T[..., 0] - T[..., 3]
            avg_n = 0.5 * ((T[..., 1] + T[..., 4]) * nx + (T[..., 2] + T[..., 5]) * nz)
            GT = G["theta"]
            GT[..., 0] += k * (-avg_n + pen * jt)
            GT[..., 3] += k * (avg_n - pen * jt)
            for j, nj in ((1, nx), (2, nz)):
                GT[..., j] += -0.5 * k * jt * nj
                GT[..., 3 + j] += -0.5 * k * jt * nj
            if jac:
                DTT = d("theta", "theta")
                DTT[..., 0, 0] += k * pen
                DTT[..., 0, 3] += -k * pen
                DTT[..., 3, 0] += -k * pen
                DTT[..., 3, 3] += k * pen
                for j, nj in ((1, nx), (2, nz)):
                    for o in (0, 3):
                        DTT[..., 0, o + j] += -0.5 * k * nj
                        DTT[..., 3, o + j] += 0.5 * k * nj
                        DTT[..., o + j, 0] += -0.5 * k * nj
                        DTT[..., o + j, 3] += 0.5 * k * nj
        return G, D

    # -- generic assembly ------------------------------------------------------
    def _chunks(self, n):
        for start in range(0, n, self.chunk):
            yield slice(start, min(n, start + self.chunk))

    def _flux(self, es, F, sl, terms, jac):
        if es.kind == "cells":
            return self._cell_flux(F, sl, terms, jac)
        return self._facet_flux(es, F, sl, terms, jac)

    def spatial_residual(self, x_mid, terms=ALL_TERMS) -> np.ndarray:
        """Spatial terms of every equation evaluated at ``x_mid``."""
        x = self._clean(x_mid)
        r = np.zeros(self.size)
        for es in [self.cells] + self.facet_sets:
            for sl in self._chunks(es.size):
                F = self._element_quantities(es, x, sl)
                G, _ = self._flux(es, F, sl, terms, False)
                w = es.weights[sl]
                for f in self.fields:
                    loc = np.einsum("eqia,eqa,eq->ei", es.tables[f][sl], G[f], w)
                    r += np.bincount(es.dofs[f][sl].ravel(), loc.ravel(), minlength=self.size)
        return r

    def spatial_jacobian_data(self, x_mid, terms=ALL_TERMS) -> np.ndarray:
        """CSR data of the derivative of :meth:`spatial_residual`."""
        x = self._clean(x_mid)
        data = np.zeros(self.nnz)
        offs, o = {}, 0
        for f in self.fields:
            nb = self.cells.dofs[f].shape[1]
            offs[f] = o
            o += nb
        for es in [self.cells] + self.facet_sets:
            fo, o = {}, 0
            for f in self.fields:
                fo[f] = o
                o += es.dofs[f].shape[1]
            nloc = o
            for sl in self._chunks(es.size):
                F = self._element_quantities(es, x, sl)
                _, D = self._flux(es, F, sl, terms, True)
                w = es.weights[sl]
                ne = w.shape[0]
                K = np.zeros((ne, nloc, nloc))
                for (a, b), Dab in D.items():
                    Ta = es.tables[a][sl]
                    Tb = es.tables[b][sl]
                    E = np.matmul(Dab * w[..., None, None], np.swapaxes(Tb, -1, -2))
                    na, nb = Ta.shape[2], Tb.shape[2]
                    Ta2 = np.swapaxes(Ta, 1, 2).reshape(ne, na, -1)
                    E2 = E.reshape(ne, -1, nb)
                    K[:, fo[a]:fo[a] + na, fo[b]:fo[b] + nb] += np.matmul(Ta2, E2)
                data += np.bincount(es.scatter[sl].ravel(), K.ravel(), minlength=self.nnz)
        return data

    def _csr(self, data) -> sp.csr_matrix:
        A = sp.csr_matrix((data, self._indices, self._indptr), shape=(self.size, self.size))
        A.has_sorted_indices = True
        return A

    def _mass_data(self) -> np.ndarray:
        if not hasattr(self, "_mass_positions"):
            pos, vals = [], []
            for f in self.fields:
                M = self._mass[f].tocoo()
                o = self.offsets[f]
                k = (M.row.astype(np.int64) + o) * self.size + (M.col + o)
                pos.append(np.searchsorted(self._keys, k))
                vals.append(M.data)
            self._mass_positions = np.concatenate(pos)
            self._mass_values = np.concatenate(vals)
        return np.bincount(self._mass_positions, self._mass_values, minlength=self.nnz)

    def mass_action(self, dx) -> np.ndarray:
        out = np.zeros(self.size)
        for f in self.fields:
            out[self.slice(f)] = self._mass[f] @ dx[self.slice(f)]
        return out

    # -- implicit midpoint system ---------------------------------------------
    def residual(self, x_new, x_old, dt: float, terms=ALL_TERMS) -> np.ndarray:
        """Implicit-midpoint residual; constrained rows hold ``x_new`` itself.

        A negative ``dt`` integrates backwards in time.
        """
        if dt == 0:
            raise ValueError("time step must be nonzero")
        x_new = np.asarray(x_new, dtype=float)
        x_old = np.asarray(x_old, dtype=float)
        x_mid = 0.5 * (x_new + x_old)
        r = self.mass_action(self._clean(x_new) - self._clean(x_old)) / dt
        r += self.spatial_residual(x_mid, terms)
        r[self.constrained] = x_new[self.constrained]
        return r

    def jacobian(self, x_new, x_old, dt: float, terms=ALL_TERMS) -> sp.csr_matrix:
        """Exact derivative of :meth:`residual` with respect to ``x_new``."""
        if dt == 0:
            raise ValueError("time step must be nonzero")
        x_mid = 0.5 * (np.asarray(x_new, dtype=float) + np.asarray(x_old, dtype=float))
        data = 0.5 * self.spatial_jacobian_data(x_mid, terms) + self._mass_data() / dt
        data[self._constrained_entries] = 0.0
        data[self._constrained_diag] = 1.0
        return self._csr(data)

    # -- per-equation contributions ------------------------------------------
    def _equation_residual(self, names, mid: State, tendency, terms):
        x = self.state_to_vector(mid)
        r = self.spatial_residual(x, terms)
        if tendency is not None:
            r += self.mass_action(self._clean(self.state_to_vector(tendency)))
        out = r[self.slice(names[0])]
        if len(names) > 1 and names[1] in self.fields:
            return out, r[self.slice(names[1])]
        return out

    def momentum_residual(self, state_mid: State, tendency: State | None = None):
        """Velocity-equation residual; ``tendency`` holds ``(X^{n+1} - X^n)/dt``.

        Returns the in-plane residual, or the pair (in-plane, out-of-plane)
        when the model carries ``u_y``.
        """
        terms = {"advection", "pressure", "gravity", "coriolis", "damping", "viscosity", "transport_uy"}
        r = self._equation_residual(("u", "uy"), state_mid, tendency, frozenset(terms))
        if isinstance(r, tuple):
            r[0][self.spaces["u"].dofmap.constrained] = 0.0
        else:
            r[self.spaces["u"].dofmap.constrained] = 0.0
        return r

    def theta_residual(self, state_mid: State, tendency: State | None = None) -> np.ndarray:
        terms = {"transport_theta", "stabilisation", "diffusion"}
        return self._equation_residual(("theta",), state_mid, tendency, frozenset(terms))

    def density_residual(self, state_mid: State, tendency: State | None = None) -> np.ndarray:
        return self._equation_residual(("rho",), state_mid, tendency, frozenset({"transport_rho"}))

    def viscosity_residual(self, u_mid: Field) -> np.ndarray:
        """Interior-penalty viscous term applied to ``u_mid`` (requires ``nu > 0``)."""
        if self.params.nu <= 0:
            raise ValueError("viscosity_residual needs nu > 0")
        x = np.zeros(self.size)
        x[self.slice("u")] = u_mid.coefficients
        x[self.slice("rho")] = 1.0
        x[self.slice("theta")] = 1.0
        r = self.spatial_residual(x, frozenset({"viscosity"}))[self.slice("u")]
        r[self.spaces["u"].dofmap.constrained] = 0.0
        return r

    def viscosity_matrix(self) -> sp.csr_matrix:
        """Matrix of the interior-penalty viscous operator on the velocity space."""
        x = np.zeros(self.size)
        x[self.slice("rho")] = 1.0
        x[self.slice("theta")] = 1.0
        A = self._csr(self.spatial_jacobian_data(x, frozenset({"viscosity"})))
        s = self.slice("u")
        A = A[s][:, s].tocsr()
        free = self.spaces["u"].dofmap.unconstrained
        return A[free][:, free]

    # -- diagnostics -------------------------------------------------------------
    def total_mass(self, x) -> float:
        V = self.spaces["rho"]
        rho = V.at_quadrature(np.asarray(x)[self.slice("rho")])
        return float(np.sum(rho * self.cells.weights))

    def residual_scaling(self) -> np.ndarray:
        """Inverse mass-matrix diagonal, turning residual rows into field rates."""
        s = np.ones(self.size)
        for f in self.fields:
            s[self.slice(f)] = 1.0 / self._mass[f].diagonal()
        s[self.constrained] = 1.0
        return s
