import numpy as np
import pytest

from slicefem.femspace import Field, FunctionSpace
from slicefem.forms import exner
from slicefem.mesh import build_mesh
from slicefem.solver import Stepper
from slicefem.testcases import (CASES, STRAKA_RESOLUTIONS, agnesi, diagnostics, front_location, get_case,
                                gravity_wave_perturbation, init_case, init_density_current,
                                init_gravity_wave, init_mountain, list_cases, perturbation_extrema,
                                schar_mountain, straka_temperature)

GOLDEN = {
    # name: (Lx, H, ncols, nlayers, dt, t_end, wind, f, N)
    "gw_nh": (3.0e5, 1.0e4, 150, 5, 12.0, 3000.0, 20.0, 0.0, 0.01),
    "gw_h": (6.0e6, 1.0e4, 300, 10, 100.0, 60000.0, 20.0, 1e-4, 0.01),
    "straka": (51200.0, 6400.0, 64, 8, 4.0, 900.0, 0.0, 0.0, 0.0),
    "mtn_nh": (144000.0, 35000.0, 180, 70, 5.0, 9000.0, 10.0, 0.0, 0.01),
    "mtn_h": (240000.0, 50000.0, 100, 60, 20.0, 15000.0, 20.0, 1e-4, 0.01),
    "schar": (1.0e5, 3.0e4, 100, 50, 8.0, 18000.0, 10.0, 0.0, 0.01),
}


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_constants(name):
    s = get_case(name)
    Lx, H, nc, nl, dt, t_end, wind, f, N = GOLDEN[name]
    assert (s.Lx, s.H, s.ncols, s.nlayers, s.dt, s.t_end, s.initial_wind) == (Lx, H, nc, nl, dt, t_end, wind)
    assert s.constants.f == f and s.constants.N == N
    assert s.constants.g == 9.810616 and s.constants.c_p == 1004.5 and s.constants.R == 287.0
    assert s.constants.p0 == 1.0e5


def test_case_specific_constants():
    assert CASES["gw_nh"].perturbation == {"dtheta0": 1e-2, "a": 5.0e3}
    assert CASES["gw_h"].perturbation["a"] == 1.0e5 and CASES["gw_h"].y_velocity
    assert CASES["straka"].nu == 75.0 and CASES["straka"].theta_diffusivity == 75.0
    assert CASES["mtn_nh"].absorbing == (2.5e4, 0.15) and CASES["mtn_nh"].orography_params == {"a": 1.0e4}
    assert CASES["mtn_h"].absorbing == (3.0e4, 0.3) and CASES["mtn_h"].orography_params == {"a": 1.0e3}
    assert CASES["mtn_h"].surface_temperature == 250.0 and CASES["mtn_h"].background == "isothermal"
    assert CASES["schar"].absorbing == (2.0e4, 1.2)
    assert CASES["schar"].orography_params == {"h_m": 250.0, "lam": 4.0e3, "a": 5.0e3}
    assert STRAKA_RESOLUTIONS[800] == (64, 8, 4.0) and STRAKA_RESOLUTIONS[100] == (512, 64, 0.5)
    assert CASES["straka"].nsteps == 225 and CASES["gw_nh"].nsteps == 250


def test_derived_quantities():
    s = get_case("mtn_nh")
    assert s.mu_bar == pytest.approx(0.15 / 5.0)
    assert get_case("gw_h").forcing == (0.0, -20.0 * 1e-4, 0.0)
    assert get_case("gw_nh").forcing == (0.0, 0.0, 0.0)
    assert s.with_overrides(dt=2.5).mu_bar == pytest.approx(0.06)
    assert s.with_overrides(ncols=None).ncols == 180


def test_list_and_unknown_cases():
    assert list_cases() == sorted(GOLDEN)
    with pytest.raises(KeyError):
        get_case("nope")


def test_gravity_wave_perturbation_examples():
    H, a = 1.0e4, 5.0e3
    assert gravity_wave_perturbation(0.0, H / 2, H, a) == pytest.approx(1e-2)
    assert gravity_wave_perturbation(a, H / 2, H, a) == pytest.approx(5e-3)
    assert gravity_wave_perturbation(-a, H / 2, H, a) == gravity_wave_perturbation(a, H / 2, H, a)


def test_gravity_wave_surface_theta():
    s = init_gravity_wave("nonhydrostatic", get_case("gw_nh").with_overrides(ncols=10))
    Vt = FunctionSpace(s.mesh, "theta_space")
    assert Vt.evaluate(s.theta_b, [0.0], [0.0])[0] == pytest.approx(300.0, rel=1e-6)


def test_straka_temperature_examples():
    assert straka_temperature(0.0, 3000.0) == pytest.approx(-15.0)
    assert straka_temperature(4000.0, 3000.0) == 0.0
    assert straka_temperature(0.0, 6000.0) == 0.0
    assert straka_temperature(2000.0, 3000.0) == pytest.approx(-7.5)


def test_straka_initial_minimum():
    s = init_density_current(800)
    lo, hi = perturbation_extrema(s.state.theta, s.theta_b)
    assert -17.0 <= lo <= -14.0
    # projecting the non-smooth bubble overshoots slightly above zero
    assert 0.0 <= hi <= 0.02 * abs(lo)
    # the perturbation leaves rho * theta unchanged to projection accuracy
    V2 = FunctionSpace(s.mesh, "density_dgq1")
    Vt = FunctionSpace(s.mesh, "theta_space")
    p0 = V2.at_quadrature(s.rho_b) * Vt.at_quadrature(s.theta_b)
    p1 = V2.at_quadrature(s.state.rho) * Vt.at_quadrature(s.state.theta)
    assert np.abs(p1 / p0 - 1).max() < 0.02
    with pytest.raises(ValueError):
        init_density_current(300)


def test_gravity_wave_pressure_balanced_variant():
    spec = get_case("gw_nh").with_overrides(ncols=30, nlayers=5)
    plain = init_gravity_wave("nonhydrostatic", spec)
    bal = init_gravity_wave("nonhydrostatic", spec, pressure_balanced=True)
    np.testing.assert_array_equal(plain.state.theta.coefficients, bal.state.theta.coefficients)
    V2 = FunctionSpace(plain.mesh, "density_dgq1")
    Vt = FunctionSpace(plain.mesh, "theta_space")
    p0 = V2.at_quadrature(plain.rho_b) * Vt.at_quadrature(plain.theta_b)

    def drift(s):
        return np.abs(V2.at_quadrature(s.state.rho) * Vt.at_quadrature(s.state.theta) / p0 - 1).max()
    # the bump perturbs rho * theta by about dtheta0 / theta ~ 3e-5 unless compensated
    assert drift(plain) > 1e-5
    assert drift(bal) < 1e-6


def test_straka_text_variant_differs():
    a = init_density_current(800)
    b = init_density_current(800, rho_variant="text")
    assert not np.allclose(a.state.rho.coefficients, b.state.rho.coefficients)
    with pytest.raises(ValueError):
        init_density_current(800, rho_variant="other")


def test_orography_examples():
    z = agnesi(1.0e4)
    assert z(0.0) == pytest.approx(1.0) and z(1.0e4) == pytest.approx(0.5)
    zs = schar_mountain()
    assert zs(0.0) == pytest.approx(250.0)
    assert zs(2.0e3) == pytest.approx(0.0, abs=1e-12)
    direct = 250.0 * np.exp(-1.0) * np.cos(np.pi * 5.0e3 / 4.0e3) ** 2
    assert zs(5.0e3) == pytest.approx(direct, rel=1e-12)


def test_absorbing_profile_monotone_continuous():
    s = get_case("mtn_nh")
    mu = s.model_params().mu_profile
    z = np.linspace(0, s.H, 2001)
    m = mu(z)
    assert np.all(m[z < 2.5e4] == 0) and mu(2.5e4) == 0.0
    assert mu(s.H) == pytest.approx(s.mu_bar)
    above = m[z >= 2.5e4]
    assert np.all(np.diff(above) >= 0)
    assert np.abs(np.diff(m)).max() < 1e-3 * s.mu_bar * 20


def test_mountain_surface_exner():
    spec = get_case("mtn_h").with_overrides(ncols=20, nlayers=20)
    s = init_mountain("hydrostatic", spec)
    assert s.pi_top is not None and 0 < s.pi_top < 1
    Vt = FunctionSpace(s.mesh, "theta_space")
    assert Vt.evaluate(s.theta_b, [0.0], [s.mesh.vertex_z[spec.ncols // 2, 0] + 1e-6])[0] == pytest.approx(250.0, rel=1e-3)
    assert s.state.u_y is not None and s.params.balance_forcing[1] == pytest.approx(-20.0 * 1e-4)
    # mesh follows the ridge
    peak = s.mesh.vertex_z[np.argmin(np.abs(s.mesh.vertex_x)), 0]
    assert peak == pytest.approx(1.0, rel=0.1)


def test_init_case_dispatch():
    s = init_case(get_case("schar").with_overrides(ncols=10, nlayers=5))
    assert s.mesh.vertex_z[:, 0].max() > 100
    mesh, state, params = init_case("gw_nh", perturb=False)
    assert params.has_y_velocity is False and state.u_y is None


def test_front_location_examples():
    mesh = build_mesh(64, 8, 51200.0, 6400.0, -25600.0)
    Vt = FunctionSpace(mesh, "theta_space")
    theta_b = Field("theta_space", np.full(Vt.dim, 300.0))
    assert front_location(theta_b, theta_b, mesh) == -25600.0
    th = theta_b.copy()
    col = int((14400.0 + 25600.0) / 800.0)
    cell = mesh.cell_index(col, 2)
    th.coefficients[Vt.dofmap.cell_to_global[cell]] -= 1.0
    assert front_location(th, theta_b, mesh) == pytest.approx(15200.0)
    th2 = theta_b.copy()
    th2.coefficients[:] -= 1e-12
    assert front_location(th2, theta_b, mesh) == -25600.0


def test_perturbation_extrema_unperturbed():
    f = Field("theta_space", np.full(10, 300.0))
    assert perturbation_extrema(f, f) == (0.0, 0.0)


def test_gravity_wave_symmetry_without_wind():
    spec = get_case("gw_nh").with_overrides(ncols=40, Lx=8.0e4)
    s = init_gravity_wave("nonhydrostatic", spec, wind=0.0)
    m = s.model()
    st = Stepper(m)
    x = st.step(m.state_to_vector(s.state), spec.dt)
    V1 = m.spaces["u"]
    X = np.linspace(300.0, 3.9e4, 40)
    Z = np.linspace(500.0, 9500.0, 40)
    w_plus = V1.evaluate(x[m.slice("u")], X, Z)[:, 1]
    w_minus = V1.evaluate(x[m.slice("u")], -X, Z)[:, 1]
    assert np.abs(w_plus).max() > 1e-7
    assert np.abs(w_plus - w_minus).max() <= 1e-8


def test_diagnostics_keys():
    s = init_gravity_wave("nonhydrostatic")
    m = s.model()
    d = diagnostics(m, m.state_to_vector(s.state), s.theta_b)
    assert set(d) == {"mass", "theta_pert_min", "theta_pert_max", "front_location", "w_min", "w_max"}
    assert d["theta_pert_max"] == pytest.approx(1e-2, rel=0.05)
    assert d["mass"] > 0
    assert s.mesh.x_offset <= d["front_location"] <= s.mesh.x_offset + s.mesh.Lx


def test_spec_validation():
    with pytest.raises(ValueError):
        get_case("gw_nh").with_overrides(dt=-1.0)
    with pytest.raises(ValueError):
        get_case("gw_nh").with_overrides(background="weird")
    assert get_case("straka").to_dict()["name"] == "straka"
