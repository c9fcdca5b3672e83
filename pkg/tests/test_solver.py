import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from slicefem.femspace import build_dofmap
from slicefem.mesh import build_mesh
from slicefem.solver import (AdditiveSchwarz, NewtonError, SolverConfig, Stepper, asm_apply, bandwidth,
                             build_patches, gmres, newton_solve, rcm_ordering, step)
from slicefem.testcases import get_case, init_gravity_wave


def _permuted(A, perm):
    A = sp.csr_matrix(A)
    return A[perm][:, perm]


# -- RCM ----------------------------------------------------------------------
def test_rcm_scrambled_path():
    order = [2, 0, 3, 1]  # path 2-0-3-1 in node labels
    rows, cols = [], []
    for a, b in zip(order[:-1], order[1:]):
        rows += [a, b]
        cols += [b, a]
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(4, 4))
    assert bandwidth(A) > 1
    best = min(bandwidth(_permuted(A, list(p))) for p in itertools.permutations(range(4)))
    assert best == 1
    assert bandwidth(_permuted(A, rcm_ordering(A))) == 1


def test_rcm_tridiagonal_unchanged():
    A = sp.diags([np.ones(9), 2 * np.ones(10), np.ones(9)], [-1, 0, 1])
    perm = rcm_ordering(A)
    assert sorted(perm) == list(range(10))
    assert bandwidth(_permuted(A, perm)) == 1


def test_rcm_components_contiguous():
    a = sp.diags([np.ones(3), np.ones(3)], [-1, 1], shape=(4, 4))
    A = sp.block_diag([a, a, sp.csr_matrix((1, 1))]).tocsr()
    scramble = np.random.default_rng(0).permutation(9)
    B = _permuted(A, scramble)
    comp = np.array([0] * 4 + [1] * 4 + [2])[scramble]
    labels = comp[rcm_ordering(B)]
    changes = np.count_nonzero(np.diff(labels))
    assert changes == 2


def test_rcm_deterministic_and_reduces_bandwidth():
    rng = np.random.default_rng(1)
    n = 60
    A = sp.diags([np.ones(n - 1), np.ones(n), np.ones(n - 1)], [-1, 0, 1]).tocsr()
    p = rng.permutation(n)
    B = _permuted(A, p)
    assert np.array_equal(rcm_ordering(B), rcm_ordering(B))
    assert bandwidth(_permuted(B, rcm_ordering(B))) <= 2


# -- GMRES --------------------------------------------------------------------
def test_gmres_identity():
    b = np.arange(1.0, 6.0)
    r = gmres(sp.identity(5, format="csr"), b)
    assert r.converged and r.iterations == 1
    np.testing.assert_allclose(r.x, b)


def test_gmres_random_matches_dense_lu():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(50, 50)) + 12 * np.eye(50)
    b = rng.normal(size=50)
    r = gmres(A, b, config=SolverConfig(gmres_tol_rel=1e-12))
    np.testing.assert_allclose(r.x, np.linalg.solve(A, b), atol=1e-8)
    assert np.linalg.norm(b - A @ r.x) <= 1e-12 * np.linalg.norm(b) * 1.01


def test_gmres_exact_preconditioner():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(30, 30)) + 5 * np.eye(30)
    Ainv = np.linalg.inv(A)
    r = gmres(A, rng.normal(size=30), preconditioner=lambda v: Ainv @ v)
    assert r.iterations <= 2


def test_gmres_restart_and_monotone_history():
    rng = np.random.default_rng(3)
    n = 120
    A = sp.diags([-np.ones(n - 1), 2.5 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()
    A = A + sp.csr_matrix(0.3 * rng.normal(size=(n, n)) / np.sqrt(n))
    b = rng.normal(size=n)
    cfg = SolverConfig(gmres_restart=10, gmres_tol_rel=1e-10)
    r = gmres(A, b, config=cfg)
    assert r.converged
    assert np.linalg.norm(b - A @ r.x) <= 1e-10 * np.linalg.norm(b) * 1.01
    h = np.asarray(r.history)
    for k in range(0, len(h), cfg.gmres_restart):
        cycle = h[k:k + cfg.gmres_restart]
        assert np.all(np.diff(cycle) <= 1e-12 * cycle[0])


def test_gmres_reports_nonconvergence():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(40, 40))
    r = gmres(A, rng.normal(size=40), config=SolverConfig(gmres_restart=3, gmres_max_its=6))
    assert not r.converged and r.iterations == 6 and r.residual_norm > 0


def test_gmres_zero_rhs():
    r = gmres(sp.identity(4, format="csr"), np.zeros(4))
    assert r.converged and r.iterations == 0
    np.testing.assert_array_equal(r.x, 0.0)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(newton_tol_abs=0.0)
    with pytest.raises(ValueError):
        SolverConfig(gmres_restart=0)


# -- patches --------------------------------------------------------------------
def _dofmaps(mesh):
    maps = {"u": build_dofmap("velocity_rt1", mesh), "rho": build_dofmap("density_dgq1", mesh),
            "theta": build_dofmap("theta_space", mesh)}
    offsets, n = {}, 0
    for k, dm in maps.items():
        offsets[k] = n
        n += dm.num_global
    return maps, offsets, n


def test_patches_two_columns():
    mesh = build_mesh(2, 1, 2.0, 1.0)
    maps, offsets, n = _dofmaps(mesh)
    patches = build_patches(mesh, maps, offsets)
    assert len(patches) == 2
    constrained = maps["u"].constrained + offsets["u"]
    covered = np.zeros(n, int)
    for p in patches:
        covered[p.dof_indices] += 1
    free = np.setdiff1d(np.arange(n), constrained)
    assert np.all(covered[free] >= 1) and np.all(covered[constrained] == 0)
    # vertical-facet velocity unknowns on the two seam lines: one patch each
    nv = 2 * mesh.ncols * mesh.nlayers
    np.testing.assert_array_equal(covered[offsets["u"]:offsets["u"] + nv], 1)


def test_patches_gravity_wave_mesh():
    spec = get_case("gw_nh")
    mesh = build_mesh(spec.ncols, spec.nlayers, spec.Lx, spec.H)
    maps, offsets, n = _dofmaps(mesh)
    patches = build_patches(mesh, maps, offsets)
    assert len(patches) == 150
    c2g = {k: dm.cell_to_global + offsets[k] for k, dm in maps.items()}
    for p in patches[:5] + patches[-5:]:
        members = set(p.dof_indices.tolist())
        touched = [c for c in range(mesh.num_cells)
                   if members & set(c2g["rho"][c].tolist())]
        assert len(touched) == 10
        cols = {mesh.cell_column(c) for c in touched}
        assert cols == {(p.vertex_column - 1) % 150, p.vertex_column}
    constrained = maps["u"].constrained + offsets["u"]
    mult = np.bincount(np.concatenate([p.dof_indices for p in patches]), minlength=n)
    free = np.setdiff1d(np.arange(n), constrained)
    assert mult[free].min() >= 1 and mult.max() <= 2
    assert not np.isin(constrained, np.concatenate([p.dof_indices for p in patches])).any()
    again = build_patches(mesh, maps, offsets)
    assert all(np.array_equal(a.dof_indices, b.dof_indices) for a, b in zip(patches, again))


@pytest.fixture(scope="module")
def small_asm():
    mesh = build_mesh(6, 3, 6.0, 3.0)
    maps, offsets, n = _dofmaps(mesh)
    patches = build_patches(mesh, maps, offsets)
    constrained = maps["u"].constrained + offsets["u"]
    return AdditiveSchwarz(patches, n, constrained), n, constrained


def test_asm_identity_gives_multiplicity(small_asm):
    asm, n, constrained = small_asm
    asm.factorize(sp.identity(n, format="csr"))
    r = np.random.default_rng(0).normal(size=n)
    out = asm_apply(asm, r)
    mult = asm.multiplicity.astype(float)
    mult[constrained] = 1.0
    np.testing.assert_allclose(out, mult * r, rtol=1e-14)


def test_asm_linear(small_asm):
    asm, n, _ = small_asm
    rng = np.random.default_rng(1)
    A = sp.random(n, n, density=0.05, random_state=2, format="csr") + 10 * sp.identity(n, format="csr")
    asm.factorize(A.tocsr())
    r1, r2 = rng.normal(size=n), rng.normal(size=n)
    lhs = asm.apply(2.5 * r1 - 0.7 * r2)
    rhs = 2.5 * asm.apply(r1) - 0.7 * asm.apply(r2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * np.abs(rhs).max())


def test_asm_exact_on_aligned_block_diagonal():
    """Non-overlapping patches with a block-diagonal matrix: ASM is the exact inverse."""
    from slicefem.solver import ColumnPatch
    rng = np.random.default_rng(5)
    blocks = [np.arange(0, 7), np.arange(7, 15), np.arange(15, 20)]
    n = 20
    A = sp.block_diag([rng.normal(size=(b.size, b.size)) + 6 * np.eye(b.size) for b in blocks]).tocsr()
    asm = AdditiveSchwarz([ColumnPatch(i, b) for i, b in enumerate(blocks)], n)
    asm.factorize(A)
    b = rng.normal(size=n)
    res = gmres(A, b, asm)
    assert res.iterations <= 2
    np.testing.assert_allclose(A @ res.x, b, atol=1e-9)


def test_asm_requires_factorization(small_asm):
    asm = AdditiveSchwarz(small_asm[0].patches, small_asm[1])
    with pytest.raises(RuntimeError):
        asm.apply(np.zeros(small_asm[1]))


# -- Newton ---------------------------------------------------------------------
def test_newton_scalar_quadratic():
    x, st = newton_solve(lambda x: x ** 2 - 4.0, lambda x: np.atleast_2d(2 * x), np.array([3.0]),
                         SolverConfig(newton_tol_abs=1e-14, newton_tol_rel=1e-15))
    assert x[0] == pytest.approx(2.0, abs=1e-12)
    assert st.newton_its <= 6
    r = np.asarray(st.residual_norms)
    # quadratic tail: e_{k+1} ~ e_k^2 / 4
    assert r[-2] <= 1.5 * r[-3] ** 2


def test_newton_already_converged():
    x0 = np.array([2.0])
    x, st = newton_solve(lambda x: x ** 2 - 4.0, lambda x: np.atleast_2d(2 * x), x0)
    assert st.newton_its == 0 and x[0] == 2.0


def test_newton_failure_raises():
    with pytest.raises(NewtonError):
        newton_solve(lambda x: x ** 2 + 1.0, lambda x: np.atleast_2d(2 * x), np.array([1.0]),
                     SolverConfig(newton_max_its=5))


def test_newton_nonfinite_initial_residual():
    with pytest.raises(NewtonError):
        newton_solve(lambda x: x * np.inf, lambda x: np.eye(1), np.array([1.0]))


# -- timestepping ------------------------------------------------------------------
@pytest.fixture(scope="module")
def small_gw():
    spec = get_case("gw_nh").with_overrides(ncols=30, Lx=6.0e4, t_end=120.0)
    return spec


def test_step_rejects_nonpositive_dt(small_gw):
    s = init_gravity_wave("nonhydrostatic", small_gw, perturb=False, wind=0.0)
    m = s.model()
    with pytest.raises(ValueError):
        Stepper(m).step(m.state_to_vector(s.state), 0.0)


def test_rest_state_ten_steps(small_gw):
    s = init_gravity_wave("nonhydrostatic", small_gw, perturb=False, wind=0.0)
    m = s.model()
    x = m.state_to_vector(s.state)
    st = Stepper(m)
    for _ in range(10):
        x = st.step(x, small_gw.dt)
    u = m.spaces["u"].at_quadrature(x[m.slice("u")])
    assert np.abs(u).max() <= 1e-6
    assert max(h.newton_its for h in st.history) <= 1


class _ExactLU:
    """Sparse direct solve used as a GMRES preconditioner."""

    def factorize(self, A):
        import scipy.sparse.linalg as spla
        self.lu = spla.splu(sp.csc_matrix(A))

    def apply(self, r):
        return self.lu.solve(r)

    __call__ = apply


def test_midpoint_reversible(small_gw):
    # backwards in time the upwind terms are anti-dissipative and the column
    # patches stop being a good preconditioner, so the reverse solve uses LU
    s = init_gravity_wave("nonhydrostatic", small_gw)
    m = s.model()
    x0 = m.state_to_vector(s.state)
    stepper = Stepper(m)
    x1, stats = step(m, x0, small_gw.dt, stepper=stepper)
    assert 1 <= stats.newton_its <= 3
    xb, _ = newton_solve(lambda x: m.residual(x, x1, -small_gw.dt), lambda x: m.jacobian(x, x1, -small_gw.dt),
                         x1, stepper.config, _ExactLU(), stepper.norm)
    diff = stepper.norm(m.mass_action(xb - x0) / small_gw.dt)
    assert diff <= 10 * stepper.config.newton_tol_abs
    assert np.abs(x1 - x0).max() > 1e3 * np.abs(xb - x0).max()
