"""Periodic extruded quadrilateral meshes for vertical-slice models.

Cells are numbered column-major: all layers of column 0, then column 1, and
so on, so ``cell = column * nlayers + layer``.  The reference cell is
``[-1, 1]^2`` with coordinates ``(xi, zeta)``; ``xi`` runs left to right and
``zeta`` bottom to top.  Lateral boundaries are always periodic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ExtrudedMesh",
    "CellGeometry",
    "FacetRef",
    "build_mesh",
    "apply_terrain",
    "cell_geometry",
    "facet_meshscale",
    "MeshError",
]

# local facet ids on the reference square
LEFT, RIGHT, BOTTOM, TOP = 0, 1, 2, 3


class MeshError(ValueError):
    """Raised for invalid mesh parameters or degenerate cells."""


@dataclass(frozen=True)
class CellGeometry:
    jacobian: np.ndarray
    det_jacobian: float
    inverse_jacobian: np.ndarray


@dataclass(frozen=True)
class FacetRef:
    kind: str
    plus_cell: int
    minus_cell: int
    local_facet_ids: tuple[int, int]
    normal: np.ndarray
    area: float


@dataclass(frozen=True, eq=False)
class ExtrudedMesh:
    """Columns x layers mesh, periodic in x.

    ``vertex_z[i, k]`` is the height of level ``k`` on vertex line ``i``;
    vertex line ``i`` sits at ``x_offset + i * Lx / ncols`` and line
    ``ncols`` is identified with line 0.
    """

    ncols: int
    nlayers: int
    Lx: float
    H: float
    x_offset: float
    vertex_z: np.ndarray = field(repr=False)
    periodic_x: bool = True

    def __post_init__(self):
        self.vertex_z.setflags(write=False)

    # -- basic sizes ----------------------------------------------------
    @property
    def dx(self) -> float:
        return self.Lx / self.ncols

    @property
    def num_cells(self) -> int:
        return self.ncols * self.nlayers

    @property
    def vertex_x(self) -> np.ndarray:
        return self.x_offset + self.dx * np.arange(self.ncols)

    @property
    def vertex_coords(self) -> np.ndarray:
        """(ncols, nlayers + 1, 2) array of vertex (x, z) pairs."""
        x = np.broadcast_to(self.vertex_x[:, None], self.vertex_z.shape)
        return np.stack([x, self.vertex_z], axis=-1)

    @property
    def is_flat(self) -> bool:
        ref = self.vertex_z[0]
        return bool(np.all(self.vertex_z == ref[None, :]))

    def cell_index(self, column, layer):
        return np.asarray(column) * self.nlayers + np.asarray(layer)

    def cell_column(self, cell):
        return np.asarray(cell) // self.nlayers

    def cell_layer(self, cell):
        return np.asarray(cell) % self.nlayers

    # -- per-cell vertex data --------------------------------------------
    def cell_corners(self, cells=None):
        """Return ``x_left, z_bl, z_br, z_tl, z_tr`` for the given cells."""
        if cells is None:
            cells = np.arange(self.num_cells)
        cells = np.asarray(cells)
        col = cells // self.nlayers
        lay = cells % self.nlayers
        right = (col + 1) % self.ncols
        xl = self.x_offset + col * self.dx
        z = self.vertex_z
        return xl, z[col, lay], z[right, lay], z[col, lay + 1], z[right, lay + 1]

    def cell_areas(self) -> np.ndarray:
        _, zbl, zbr, ztl, ztr = self.cell_corners()
        return self.dx * 0.5 * ((ztl - zbl) + (ztr - zbr))

    def map_points(self, cells, ref_points):
        """Map reference points into the given cells.

        Parameters
        ----------
        cells : (nc,) int array
        ref_points : (np, 2) array, or (nc, np, 2) for per-cell points

        Returns
        -------
        x, z : (nc, np) arrays
        J : (nc, np, 2, 2) Jacobian ``d(x, z)/d(xi, zeta)``
        dJ : (nc, np, 2, 2, 2) derivative of J with respect to the
            reference coordinates, last axis indexing ``(xi, zeta)``
        """
        cells = np.atleast_1d(np.asarray(cells))
        xl, zbl, zbr, ztl, ztr = (a[:, None] for a in self.cell_corners(cells))
        rp = np.asarray(ref_points, dtype=float)
        if rp.ndim == 2:
            xi = rp[None, :, 0]
            ze = rp[None, :, 1]
        else:
            xi = rp[..., 0]
            ze = rp[..., 1]
        s = 0.5 * (xi + 1.0)
        t = 0.5 * (ze + 1.0)
        x = xl + s * self.dx
        x = np.broadcast_to(x, np.broadcast_shapes(x.shape, t.shape))
        z = (1 - s) * (1 - t) * zbl + s * (1 - t) * zbr + (1 - s) * t * ztl + s * t * ztr
        dz_dxi = 0.5 * ((1 - t) * (zbr - zbl) + t * (ztr - ztl))
        dz_dze = 0.5 * ((1 - s) * (ztl - zbl) + s * (ztr - zbr))
        cross = 0.25 * ((ztr - ztl) - (zbr - zbl))
        shape = z.shape
        J = np.zeros(shape + (2, 2))
        J[..., 0, 0] = 0.5 * self.dx
        J[..., 1, 0] = dz_dxi
        J[..., 1, 1] = dz_dze
        dJ = np.zeros(shape + (2, 2, 2))
        dJ[..., 1, 0, 1] = cross
        dJ[..., 1, 1, 0] = cross
        return np.array(x), z, J, dJ

    # -- facets ------------------------------------------------------------
    @property
    def vertical_facets(self):
        """Interior vertical facets as arrays ``(plus, minus, line, layer)``.

        Facet ``line * nlayers + layer`` lies on vertex line ``line``; its plus
        side is the column to the left (column ``ncols - 1`` on the seam) and
        the normal is ``(1, 0)``.
        """
        line = np.repeat(np.arange(self.ncols), self.nlayers)
        layer = np.tile(np.arange(self.nlayers), self.ncols)
        plus = self.cell_index((line - 1) % self.ncols, layer)
        minus = self.cell_index(line, layer)
        return plus, minus, line, layer

    @property
    def horizontal_facets(self):
        """Interior horizontal facets as arrays ``(plus, minus, column, level)``.

        Plus is the lower cell; the normal points upwards.
        """
        nl = self.nlayers
        col = np.repeat(np.arange(self.ncols), nl - 1)
        level = np.tile(np.arange(1, nl), self.ncols)
        plus = self.cell_index(col, level - 1)
        minus = self.cell_index(col, level)
        return plus, minus, col, level

    def boundary_cells(self, side: str) -> np.ndarray:
        layer = 0 if side == "bottom" else self.nlayers - 1
        return self.cell_index(np.arange(self.ncols), layer)

    @property
    def num_interior_vertical_facets(self) -> int:
        return self.ncols * self.nlayers

    @property
    def num_interior_horizontal_facets(self) -> int:
        return self.ncols * (self.nlayers - 1)

    def vertical_facet_lengths(self) -> np.ndarray:
        _, _, line, layer = self.vertical_facets
        return self.vertex_z[line, layer + 1] - self.vertex_z[line, layer]

    def level_facet_geometry(self, col, level):
        """Length and upward unit normal of horizontal facets at ``level``."""
        col = np.asarray(col)
        right = (col + 1) % self.ncols
        dz = self.vertex_z[right, level] - self.vertex_z[col, level]
        length = np.hypot(self.dx, dz)
        normal = np.stack([-dz / length, np.full_like(length, self.dx) / length], axis=-1)
        return length, normal

    def facet(self, kind: str, index: int) -> FacetRef:
        """Return a :class:`FacetRef` for facet ``index`` of the given kind."""
        if kind == "interior_vertical":
            plus, minus, line, layer = (a[index] for a in self.vertical_facets)
            area = self.vertex_z[line, layer + 1] - self.vertex_z[line, layer]
            return FacetRef(kind, int(plus), int(minus), (RIGHT, LEFT), np.array([1.0, 0.0]), float(area))
        if kind == "interior_horizontal":
            plus, minus, col, level = (a[index] for a in self.horizontal_facets)
            length, normal = self.level_facet_geometry(col, level)
            return FacetRef(kind, int(plus), int(minus), (TOP, BOTTOM), normal, float(length))
        if kind in ("boundary_bottom", "boundary_top"):
            side = kind.split("_")[1]
            cell = int(self.boundary_cells(side)[index])
            level = 0 if side == "bottom" else self.nlayers
            length, normal = self.level_facet_geometry(index, level)
            if side == "bottom":
                normal = -normal
                lid = BOTTOM
            else:
                lid = TOP
            return FacetRef(kind, cell, -1, (lid, -1), normal, float(length))
        raise MeshError(f"unknown facet kind {kind!r}")

    def facets(self, kind: str):
        counts = {
            "interior_vertical": self.num_interior_vertical_facets,
            "interior_horizontal": self.num_interior_horizontal_facets,
            "boundary_bottom": self.ncols,
            "boundary_top": self.ncols,
        }
        return [self.facet(kind, i) for i in range(counts[kind])]

    def check_jacobians(self, ref_points) -> None:
        cells = np.arange(self.num_cells)
        _, _, J, _ = self.map_points(cells, ref_points)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        bad = np.nonzero(np.any(det <= 0.0, axis=1))[0]
        if bad.size:
            raise MeshError(f"degenerate cell {int(bad[0])}: det J <= 0")


def build_mesh(ncols: int, nlayers: int, Lx: float, H: float, x_offset: float = 0.0) -> ExtrudedMesh:
    """Uniform periodic mesh of ``ncols x nlayers`` rectangles."""
    if int(ncols) != ncols or int(nlayers) != nlayers:
        raise MeshError("ncols and nlayers must be integers")
    if ncols < 2 or nlayers < 1:
        raise MeshError(f"need ncols >= 2 and nlayers >= 1, got {ncols}, {nlayers}")
    if not (Lx > 0 and H > 0):
        raise MeshError("Lx and H must be positive")
    levels = H * np.arange(nlayers + 1) / nlayers
    levels[-1] = H
    vz = np.tile(levels, (int(ncols), 1))
    return ExtrudedMesh(int(ncols), int(nlayers), float(Lx), float(H), float(x_offset), vz)


def apply_terrain(mesh: ExtrudedMesh, z_s: Callable[[np.ndarray], np.ndarray]) -> ExtrudedMesh:
    """Terrain-following deformation ``z -> z + z_s(x) (H - z) / H``.

    The map is applied to the current vertex heights, so the top boundary
    stays at ``z = H`` and vertex lines stay vertical.
    """
    zs = np.asarray(z_s(mesh.vertex_x), dtype=float) * np.ones(mesh.ncols)
    if np.any(zs >= mesh.H):
        raise MeshError("terrain height must stay below the model top")
    if np.any(zs < 0):
        raise MeshError("terrain height must be non-negative")
    z = mesh.vertex_z
    newz = z + zs[:, None] * (mesh.H - z) / mesh.H
    newz[:, -1] = mesh.H
    if np.any(np.diff(newz, axis=1) <= 0):
        raise MeshError("terrain map produced non-increasing column heights")
    return ExtrudedMesh(mesh.ncols, mesh.nlayers, mesh.Lx, mesh.H, mesh.x_offset, newz)


def cell_geometry(mesh: ExtrudedMesh, cell: int, ref_point) -> CellGeometry:
    """Jacobian data of the bilinear cell map at one reference point."""
    if not 0 <= cell < mesh.num_cells:
        raise MeshError(f"cell {cell} out of range")
    _, _, J, _ = mesh.map_points([cell], np.asarray(ref_point, dtype=float).reshape(1, 2))
    J = J[0, 0]
    det = float(np.linalg.det(J))
    if det <= 0.0:
        raise MeshError(f"degenerate cell {cell}: det J = {det}")
    return CellGeometry(J, det, np.linalg.inv(J))


def facet_meshscale(mesh: ExtrudedMesh, facet: FacetRef) -> float:
    """Cross-facet mesh scale: mean of the adjacent cell areas over the facet length."""
    if facet.minus_cell < 0 or not facet.kind.startswith("interior"):
        raise MeshError("meshscale is only defined on interior facets")
    areas = mesh.cell_areas()
    return 0.5 * (areas[facet.plus_cell] + areas[facet.minus_cell]) / facet.area
