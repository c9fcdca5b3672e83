"""Newton-Krylov machinery for the implicit midpoint system.

The linear solver is restarted GMRES with right preconditioning by an
additive Schwarz method whose subdomains are pairs of neighbouring cell
columns around one vertex line of the base mesh.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_triangular

from .mesh import ExtrudedMesh

__all__ = [
    "SolverConfig",
    "GMRESResult",
    "NewtonStats",
    "StepStats",
    "ColumnPatch",
    "AdditiveSchwarz",
    "NewtonError",
    "PatchFactorizationError",
    "rcm_ordering",
    "bandwidth",
    "gmres",
    "build_patches",
    "asm_apply",
    "newton_solve",
    "Stepper",
    "step",
]

log = logging.getLogger(__name__)


class NewtonError(RuntimeError):
    """Newton iteration failed to converge."""


class PatchFactorizationError(RuntimeError):
    """A patch matrix could not be factorised."""


@dataclass(frozen=True)
class SolverConfig:
    newton_tol_abs: float = 1e-8
    newton_tol_rel: float = 1e-6
    newton_max_its: int = 20
    gmres_tol_rel: float = 1e-6
    gmres_restart: int = 50
    gmres_max_its: int = 2000
    max_halvings: int = 8

    def __post_init__(self):
        for name in ("newton_tol_abs", "newton_tol_rel", "gmres_tol_rel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("newton_max_its", "gmres_restart", "gmres_max_its"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


# ---------------------------------------------------------------------------
# orderings
# ---------------------------------------------------------------------------
def rcm_ordering(adjacency) -> np.ndarray:
    """Reverse Cuthill-McKee permutation of a sparse pattern.

    The pattern is symmetrised.  Each connected component starts from its
    lowest-degree vertex (lowest index on ties) and neighbours are queued by
    increasing degree, then index.  Returns ``perm`` with ``new[k] = old[perm[k]]``.
    """
    A = sp.csr_matrix(adjacency, copy=True)
    n = A.shape[0]
    if A.shape[1] != n:
        raise ValueError("adjacency must be square")
    A.data = np.ones_like(A.data)
    A = (A + A.T).tocsr()
    A.setdiag(0)
    A.eliminate_zeros()
    A.sort_indices()
    degree = np.diff(A.indptr)
    indptr, indices = A.indptr, A.indices
    visited = np.zeros(n, dtype=bool)
    order = []
    # candidates for component starts in (degree, index) order
    starts = np.lexsort((np.arange(n), degree))
    for s in starts:
        if visited[s]:
            continue
        visited[s] = True
        queue = deque([s])
        while queue:
            v = queue.popleft()
            order.append(v)
            nb = indices[indptr[v]:indptr[v + 1]]
            nb = nb[~visited[nb]]
            if nb.size:
                nb = nb[np.lexsort((nb, degree[nb]))]
                visited[nb] = True
                queue.extend(nb.tolist())
    return np.array(order[::-1], dtype=np.int64)


def bandwidth(A) -> int:
    A = sp.coo_matrix(A)
    if A.nnz == 0:
        return 0
    return int(np.max(np.abs(A.row - A.col)))


# ---------------------------------------------------------------------------
# GMRES
# ---------------------------------------------------------------------------
@dataclass
class GMRESResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    history: list = field(default_factory=list)


def _as_operator(A) -> Callable:
    if callable(A) and not hasattr(A, "shape"):
        return A
    return lambda v: A @ v


def gmres(A, b, preconditioner=None, config: SolverConfig | None = None,
          x0=None) -> GMRESResult:
    """Restarted GMRES with right preconditioning.

    Parameters
    ----------
    A : matrix-like or callable
    b : (n,) array
    preconditioner : callable ``r -> M r`` or object with ``apply``; identity if None
    config : solver configuration supplying tolerance and restart length

    Returns
    -------
    GMRESResult
        ``history`` holds the true residual norm after every inner iteration.
    """
    cfg = config if config is not None else SolverConfig()
    matvec = _as_operator(A)
    if preconditioner is None:
        prec = lambda r: r
    elif hasattr(preconditioner, "apply"):
        prec = preconditioner.apply
    else:
        prec = preconditioner
    b = np.asarray(b, dtype=float)
    n = b.size
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    target = cfg.gmres_tol_rel * bnorm
    r = b - matvec(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    history = [beta]
    its = 0
    if beta <= target or bnorm == 0.0:
        return GMRESResult(x, 0, beta, True, history)
    m = cfg.gmres_restart
    while its < cfg.gmres_max_its:
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        Hm = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_used = 0
        for k in range(m):
            Z[k] = prec(V[k])
            w = matvec(Z[k])
            for i in range(k + 1):
                Hm[i, k] = np.dot(w, V[i])
                w = w - Hm[i, k] * V[i]
            Hm[k + 1, k] = np.linalg.norm(w)
            if Hm[k + 1, k] > 0:
                V[k + 1] = w / Hm[k + 1, k]
            for i in range(k):
                t = cs[i] * Hm[i, k] + sn[i] * Hm[i + 1, k]
                Hm[i + 1, k] = -sn[i] * Hm[i, k] + cs[i] * Hm[i + 1, k]
                Hm[i, k] = t
            denom = np.hypot(Hm[k, k], Hm[k + 1, k])
            if denom == 0.0:
                cs[k], sn[k] = 1.0, 0.0
            else:
                cs[k], sn[k] = Hm[k, k] / denom, Hm[k + 1, k] / denom
            Hm[k, k] = denom
            Hm[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            its += 1
            k_used = k + 1
            history.append(abs(g[k + 1]))
            if abs(g[k + 1]) <= target or its >= cfg.gmres_max_its or denom == 0.0:
                break
        Hk = Hm[:k_used, :k_used].copy()
        Hk[np.diag_indices(k_used)] = np.where(np.diag(Hk) == 0.0, 1.0, np.diag(Hk))
        y = solve_triangular(Hk, g[:k_used])
        x = x + Z[:k_used].T @ y
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        if beta <= target:
            return GMRESResult(x, its, beta, True, history)
    log.warning("GMRES stopped after %d iterations with residual %.3e (target %.3e)", its, beta, target)
    return GMRESResult(x, its, beta, False, history)


# ---------------------------------------------------------------------------
# column patches
# ---------------------------------------------------------------------------
@dataclass
class ColumnPatch:
    """Unknowns of the two cell columns either side of one vertex line."""

    vertex_column: int
    dof_indices: np.ndarray
    perm: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.dof_indices.size


def build_patches(mesh: ExtrudedMesh, dofmaps: dict, offsets: dict | None = None) -> list:
    """One star patch per vertex line of the periodic base mesh.

    Parameters
    ----------
    mesh : ExtrudedMesh
    dofmaps : mapping field name -> DofMap; the velocity map must be keyed ``"u"``
    offsets : mapping field name -> offset of that field in the monolithic vector

    Notes
    -----
    A patch holds every unknown supported only in its two columns plus the
    velocity unknowns on the shared vertex line.  Velocity unknowns on the
    two outer vertex lines and constrained unknowns are left out.
    """
    nc, nl = mesh.ncols, mesh.nlayers
    offsets = offsets if offsets is not None else {}
    n_vertical = 2 * nc * nl  # velocity unknowns on vertical facets come first
    per_column = []
    for col in range(nc):
        cells = mesh.cell_index(col, np.arange(nl))
        parts = []
        for name, dm in dofmaps.items():
            g = np.unique(dm.cell_to_global[cells].ravel())
            if dm.constrained.size:
                g = g[~np.isin(g, dm.constrained)]
            if name == "u":
                g = g[g >= n_vertical]
            parts.append(g + offsets.get(name, 0))
        per_column.append(np.concatenate(parts))
    o = offsets.get("u", 0)
    patches = []
    for line in range(nc):
        facet_dofs = o + 2 * (line * nl + np.arange(nl))
        line_dofs = np.stack([facet_dofs, facet_dofs + 1], axis=1).ravel()
        cols = sorted({(line - 1) % nc, line})
        dofs = np.unique(np.concatenate([line_dofs] + [per_column[c] for c in cols]))
        patches.append(ColumnPatch(line, dofs))
    return patches


class AdditiveSchwarz:
    """Sum of exact solves on column patches.

    All patch matrices are held in one block-diagonal matrix whose blocks
    are RCM-ordered; the factorisation keeps that ordering so the fill stays
    inside each block's band.
    """

    def __init__(self, patches: list, size: int, constrained=()):
        self.patches = patches
        self.size = size
        self.constrained = np.asarray(constrained, dtype=np.int64)
        self._lu = None
        self._pattern_key = None
        self.multiplicity = np.bincount(np.concatenate([p.dof_indices for p in patches]),
                                        minlength=size)

    def _setup(self, A: sp.csr_matrix):
        A = A.tocsr()
        A.sort_indices()
        P = sp.csr_matrix((np.arange(1, A.nnz + 1, dtype=float), A.indices, A.indptr), shape=A.shape)
        blocks, order = [], []
        for p in self.patches:
            sub = P[p.dof_indices][:, p.dof_indices]
            if p.perm is None:
                p.perm = rcm_ordering(sub)
            sub = sub[p.perm][:, p.perm]
            blocks.append(sub)
            order.append(p.dof_indices[p.perm])
        B = sp.block_diag(blocks, format="csc")
        B.sort_indices()
        self._positions = B.data.astype(np.int64) - 1
        self._B = B
        self._gather = np.concatenate(order)

    def factorize(self, A) -> None:
        A = sp.csr_matrix(A)
        A.sort_indices()
        key = (A.shape, A.nnz, A.indptr.tobytes().__hash__())
        if self._pattern_key != key:
            self._setup(A)
            self._pattern_key = key
        B = self._B
        B.data = A.data[self._positions]
        try:
            self._lu = spla.splu(B, permc_spec="NATURAL")
        except RuntimeError as exc:
            idx = self._singular_patch(A)
            raise PatchFactorizationError(f"patch {idx} is singular") from exc

    def _singular_patch(self, A) -> int:
        for i, p in enumerate(self.patches):
            sub = A[p.dof_indices][:, p.dof_indices].toarray()
            if np.linalg.matrix_rank(sub) < sub.shape[0]:
                return i
        return -1

    def apply(self, r) -> np.ndarray:
        if self._lu is None:
            raise RuntimeError("preconditioner used before factorize")
        r = np.asarray(r, dtype=float)
        y = self._lu.solve(r[self._gather])
        out = np.bincount(self._gather, y, minlength=self.size)
        if self.constrained.size:
            out[self.constrained] = r[self.constrained]
        return out

    __call__ = apply


def asm_apply(asm: AdditiveSchwarz, residual_vector) -> np.ndarray:
    return asm.apply(residual_vector)


# ---------------------------------------------------------------------------
# Newton
# ---------------------------------------------------------------------------
@dataclass
class NewtonStats:
    newton_its: int = 0
    gmres_its: int = 0
    residual_norms: list = field(default_factory=list)
    converged: bool = False


def newton_solve(residual_fn, jacobian_fn, initial_guess, config: SolverConfig | None = None,
                 preconditioner=None, norm: Callable | None = None):
    """Newton iteration with a halving linesearch on the residual norm.

    Parameters
    ----------
    residual_fn, jacobian_fn : callables of the current iterate
    initial_guess : array
    preconditioner : object with ``factorize(J)`` and ``apply(r)``; refactorised
        at every iteration.  Without one GMRES runs unpreconditioned.
    norm : residual norm used for convergence and linesearch

    Returns
    -------
    x, NewtonStats
    """
    cfg = config if config is not None else SolverConfig()
    norm = norm if norm is not None else np.linalg.norm
    x = np.array(initial_guess, dtype=float, copy=True)
    shape = x.shape
    x = x.ravel()
    stats = NewtonStats()
    R = np.asarray(residual_fn(x.reshape(shape)), dtype=float).ravel()
    rn = norm(R)
    if not np.isfinite(rn):
        raise NewtonError("residual is not finite at the initial guess")
    stats.residual_norms.append(rn)
    tol = max(cfg.newton_tol_abs, cfg.newton_tol_rel * rn)
    while rn > tol:
        if stats.newton_its >= cfg.newton_max_its:
            raise NewtonError(f"no convergence in {cfg.newton_max_its} iterations, residual {rn:.3e}")
        J = jacobian_fn(x.reshape(shape))
        J = J if sp.issparse(J) else np.atleast_2d(np.asarray(J, dtype=float))
        if preconditioner is not None:
            preconditioner.factorize(J)
        res = gmres(J, R, preconditioner, cfg)
        stats.gmres_its += res.iterations
        dx = res.x
        alpha = 1.0
        for _ in range(cfg.max_halvings + 1):
            trial = x - alpha * dx
            try:
                Rt = np.asarray(residual_fn(trial.reshape(shape)), dtype=float).ravel()
                tn = norm(Rt)
            except ValueError:
                tn = np.inf
            if np.isfinite(tn) and tn < rn:
                break
            alpha *= 0.5
        else:
            raise NewtonError(f"linesearch failed to reduce residual {rn:.3e}")
        x, R, rn = trial, Rt, tn
        stats.newton_its += 1
        stats.residual_norms.append(rn)
    stats.converged = True
    return x.reshape(shape), stats


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------
@dataclass
class StepStats:
    step: int
    time: float
    newton_its: int
    gmres_its: int
    residual_norms: list

    def as_record(self) -> dict:
        return {
            "step": self.step,
            "time": self.time,
            "newton_its": self.newton_its,
            "gmres_its": self.gmres_its,
            "initial_residual": self.residual_norms[0],
            "final_residual": self.residual_norms[-1],
        }


class Stepper:
    """Implicit-midpoint driver for a :class:`~slicefem.forms.SliceModel`."""

    def __init__(self, model, config: SolverConfig | None = None):
        self.model = model
        self.config = config if config is not None else SolverConfig()
        dofmaps = {f: model.spaces[f].dofmap for f in model.fields}
        self.patches = build_patches(model.mesh, dofmaps, model.offsets)
        self.asm = AdditiveSchwarz(self.patches, model.size, model.constrained)
        self.scale = model.residual_scaling()
        self.history: list[StepStats] = []
        self.time = 0.0

    def norm(self, r) -> float:
        """Root-mean-square of the residual divided by the mass-matrix diagonal."""
        return float(np.linalg.norm(self.scale * r) / np.sqrt(r.size))

    def step(self, x_n, dt: float) -> np.ndarray:
        if not dt > 0:
            raise ValueError("time step must be positive")
        model = self.model
        x_n = np.asarray(x_n, dtype=float)
        x, st = newton_solve(lambda x: model.residual(x, x_n, dt),
                             lambda x: model.jacobian(x, x_n, dt),
                             x_n, self.config, self.asm, self.norm)
        self.time += dt
        rec = StepStats(len(self.history) + 1, self.time, st.newton_its, st.gmres_its, st.residual_norms)
        self.history.append(rec)
        log.info("step %d t=%g newton=%d gmres=%d res=%.3e", rec.step, rec.time,
                 rec.newton_its, rec.gmres_its, st.residual_norms[-1])
        return x

    def mean_gmres(self, skip: int = 0) -> float:
        h = self.history[skip:]
        return float(np.mean([s.gmres_its for s in h])) if h else 0.0


def step(model, x_n, dt: float, config: SolverConfig | None = None, stepper: Stepper | None = None):
    """Advance ``x_n`` by one implicit-midpoint step; returns ``(x_new, StepStats)``."""
    stepper = stepper if stepper is not None else Stepper(model, config)
    x = stepper.step(x_n, dt)
    return x, stepper.history[-1]
