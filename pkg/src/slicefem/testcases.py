"""Benchmark vertical-slice configurations and their diagnostics."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .balance import BalanceSolver, find_top_pi
from .femspace import Field, FunctionSpace, DEFAULT_QUAD_DEGREE
from .forms import ModelParams, PhysicalConstants, SliceModel, State, absorbing_profile, exner
from .mesh import ExtrudedMesh, apply_terrain, build_mesh

__all__ = [
    "TestcaseSpec",
    "Setup",
    "CASES",
    "get_case",
    "list_cases",
    "agnesi",
    "schar_mountain",
    "straka_temperature",
    "gravity_wave_perturbation",
    "init_case",
    "init_gravity_wave",
    "init_density_current",
    "init_mountain",
    "init_schar",
    "front_location",
    "perturbation_extrema",
    "diagnostics",
]

T_SURF = 300.0
STRAKA_RESOLUTIONS = {800: (64, 8, 4.0), 400: (128, 16, 2.0), 200: (256, 32, 1.0), 100: (512, 64, 0.5)}


def agnesi(a: float, h: float = 1.0) -> Callable:
    """Witch of Agnesi ridge ``h a^2 / (x^2 + a^2)``."""
    return lambda x: h * a * a / (np.asarray(x, dtype=float) ** 2 + a * a)


def schar_mountain(h_m: float = 250.0, lam: float = 4.0e3, a: float = 5.0e3) -> Callable:
    """Gaussian envelope modulated by ``cos^2`` ripples."""
    def z_s(x):
        x = np.asarray(x, dtype=float)
        return h_m * np.exp(-(x / a) ** 2) * np.cos(np.pi * x / lam) ** 2
    return z_s


def straka_temperature(x, z, xc=0.0, xr=4000.0, zc=3000.0, zr=2000.0):
    """Cold bubble temperature anomaly in K."""
    L = np.sqrt(((np.asarray(x) - xc) / xr) ** 2 + ((np.asarray(z) - zc) / zr) ** 2)
    return np.where(L > 1.0, 0.0, -15.0 * (np.cos(np.pi * np.minimum(L, 1.0)) + 1.0) / 2.0)


def gravity_wave_perturbation(x, z, H, a, dtheta0=1e-2):
    return dtheta0 * np.sin(np.pi * np.asarray(z) / H) / (1.0 + np.asarray(x) ** 2 / a ** 2)


@dataclass(frozen=True)
class TestcaseSpec:
    """Frozen description of one benchmark run."""

    name: str
    Lx: float
    H: float
    ncols: int
    nlayers: int
    dt: float
    t_end: float
    constants: PhysicalConstants
    initial_wind: float
    perturbation: dict = field(default_factory=dict)
    orography: str | None = None          # "agnesi" or "schar"
    orography_params: dict = field(default_factory=dict)
    absorbing: tuple | None = None        # (z_B, mu_bar * dt)
    nu: float = 0.0
    theta_diffusivity: float = 0.0
    background: str = "stratified"        # stratified | isothermal | isentropic
    surface_temperature: float = T_SURF
    y_velocity: bool = False

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.ncols < 1 or self.nlayers < 1:
            raise ValueError("ncols and nlayers must be positive")
        if not (self.dt > 0 and self.t_end >= 0 and self.Lx > 0 and self.H > 0):
            raise ValueError("dt, Lx and H must be positive and t_end non-negative")
        if self.background not in ("stratified", "isothermal", "isentropic"):
            raise ValueError(f"unknown background {self.background!r}")

    @property
    def nsteps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def z_s(self) -> Callable | None:
        if self.orography == "agnesi":
            return agnesi(**self.orography_params)
        if self.orography == "schar":
            return schar_mountain(**self.orography_params)
        return None

    @property
    def mu_bar(self) -> float:
        """Damping rate obtained from the fixed product ``mu_bar * dt``."""
        return 0.0 if self.absorbing is None else self.absorbing[1] / self.dt

    @property
    def forcing(self) -> tuple:
        if self.y_velocity:
            return (0.0, -self.initial_wind * self.constants.f, 0.0)
        return (0.0, 0.0, 0.0)

    def with_overrides(self, **overrides) -> "TestcaseSpec":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def model_params(self) -> ModelParams:
        mu = None if self.absorbing is None else absorbing_profile(self.absorbing[0], self.H, self.mu_bar)
        return ModelParams(constants=self.constants, mu_profile=mu, nu=self.nu,
                           theta_diffusivity=self.theta_diffusivity, balance_forcing=self.forcing,
                           y_velocity=self.y_velocity)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


_NONROTATING = PhysicalConstants(f=0.0)

CASES = {
    "gw_nh": TestcaseSpec(
        "gw_nh", Lx=3.0e5, H=1.0e4, ncols=150, nlayers=5, dt=12.0, t_end=3000.0,
        constants=_NONROTATING, initial_wind=20.0, perturbation={"dtheta0": 1e-2, "a": 5.0e3}),
    "gw_h": TestcaseSpec(
        "gw_h", Lx=6.0e6, H=1.0e4, ncols=300, nlayers=10, dt=100.0, t_end=60000.0,
        constants=PhysicalConstants(), initial_wind=20.0, perturbation={"dtheta0": 1e-2, "a": 1.0e5},
        y_velocity=True),
    "straka": TestcaseSpec(
        "straka", Lx=51200.0, H=6400.0, ncols=64, nlayers=8, dt=4.0, t_end=900.0,
        constants=PhysicalConstants(N=0.0, f=0.0), initial_wind=0.0,
        perturbation={"xc": 0.0, "xr": 4000.0, "zc": 3000.0, "zr": 2000.0},
        nu=75.0, theta_diffusivity=75.0, background="isentropic"),
    "mtn_nh": TestcaseSpec(
        "mtn_nh", Lx=144000.0, H=35000.0, ncols=180, nlayers=70, dt=5.0, t_end=9000.0,
        constants=_NONROTATING, initial_wind=10.0, orography="agnesi",
        orography_params={"a": 1.0e4}, absorbing=(2.5e4, 0.15)),
    "mtn_h": TestcaseSpec(
        "mtn_h", Lx=240000.0, H=50000.0, ncols=100, nlayers=60, dt=20.0, t_end=15000.0,
        constants=PhysicalConstants(), initial_wind=20.0, orography="agnesi",
        orography_params={"a": 1.0e3}, absorbing=(3.0e4, 0.3), background="isothermal",
        surface_temperature=250.0, y_velocity=True),
    "schar": TestcaseSpec(
        "schar", Lx=1.0e5, H=3.0e4, ncols=100, nlayers=50, dt=8.0, t_end=18000.0,
        constants=_NONROTATING, initial_wind=10.0, orography="schar",
        orography_params={"h_m": 250.0, "lam": 4.0e3, "a": 5.0e3}, absorbing=(2.0e4, 1.2)),
}


def get_case(name: str) -> TestcaseSpec:
    try:
        return CASES[name]
    except KeyError:
        raise KeyError(f"unknown testcase {name!r}; choose from {sorted(CASES)}") from None


def list_cases() -> list:
    return sorted(CASES)


@dataclass(eq=False)
class Setup:
    """Mesh, initial state and model parameters for one run.

    Unpacks as ``mesh, state, params``; the balanced background is kept for
    diagnostics.
    """

    spec: TestcaseSpec
    mesh: ExtrudedMesh
    state: State
    params: ModelParams
    theta_b: Field
    rho_b: Field
    pi_top: float | None = None

    def __iter__(self):
        return iter((self.mesh, self.state, self.params))

    def model(self, quad_degree: int = DEFAULT_QUAD_DEGREE) -> SliceModel:
        return SliceModel(self.mesh, self.params, quad_degree)


def _background_theta(spec: TestcaseSpec) -> Callable:
    c = spec.constants
    T = spec.surface_temperature
    if spec.background == "stratified":
        return lambda x, z: T * np.exp(c.N ** 2 * z / c.g)
    if spec.background == "isothermal":
        return lambda x, z: T * np.exp(c.g * z / (T * c.c_p))
    return lambda x, z: T + 0.0 * z


def _mesh(spec: TestcaseSpec) -> ExtrudedMesh:
    mesh = build_mesh(spec.ncols, spec.nlayers, spec.Lx, spec.H, x_offset=-0.5 * spec.Lx)
    if spec.z_s is not None:
        mesh = apply_terrain(mesh, spec.z_s)
    return mesh


def _balanced_background(spec, mesh, quad_degree):
    Vt = FunctionSpace(mesh, "theta_space", quad_degree)
    theta_b = Vt.project(_background_theta(spec))
    solver = BalanceSolver(mesh, spec.constants, quad_degree)
    pi_top = None
    if spec.z_s is not None:
        pi_top = find_top_pi(theta_b, 1.0, None, mesh, spec.constants)
        rho_b, _ = solver.solve(theta_b, pi_top, "top")
    else:
        rho_b, _ = solver.solve(theta_b, 1.0, "bottom")
    return Vt, theta_b, rho_b, pi_top


def _wind(mesh, speed, quad_degree):
    V1 = FunctionSpace(mesh, "velocity_rt1", quad_degree)
    return V1.project(lambda x, z: (speed + 0.0 * x, 0.0 * x))


def init_gravity_wave(regime: str = "nonhydrostatic", spec: TestcaseSpec | None = None,
                      perturb: bool = True, wind: float | None = None,
                      quad_degree: int = DEFAULT_QUAD_DEGREE,
                      pressure_balanced: bool = False) -> Setup:
    """Stratified atmosphere with a small potential temperature bump.

    With ``pressure_balanced=True`` the density is rescaled so that
    ``rho * theta`` (hence the Exner pressure) is left unperturbed, which
    suppresses the acoustic adjustment to the initial bump.
    """
    if spec is None:
        spec = get_case({"nonhydrostatic": "gw_nh", "hydrostatic": "gw_h"}[regime])
    mesh = _mesh(spec)
    Vt, theta_b, rho_b, _ = _balanced_background(spec, mesh, quad_degree)
    theta = theta_b.copy()
    if perturb:
        p = spec.perturbation
        dth = Vt.project(lambda x, z: gravity_wave_perturbation(x, z, spec.H, p["a"], p["dtheta0"]))
        theta.coefficients += dth.coefficients
    rho = rho_b.copy()
    if perturb and pressure_balanced:
        V2 = FunctionSpace(mesh, "density_dgq1", quad_degree)
        rq = V2.at_quadrature(rho_b) * Vt.at_quadrature(theta_b) / Vt.at_quadrature(theta)
        rho = V2.project_values(rq)
    u0 = spec.initial_wind if wind is None else wind
    params = spec.model_params()
    if wind is not None and spec.y_velocity:
        params = dataclasses.replace(params, balance_forcing=(0.0, -wind * spec.constants.f, 0.0))
    uy = Field("y_velocity_dgq1", np.zeros(FunctionSpace(mesh, "y_velocity_dgq1").dim)) if params.has_y_velocity else None
    state = State(_wind(mesh, u0, quad_degree), rho, theta, uy)
    return Setup(spec, mesh, state, params, theta_b, rho_b)


def init_density_current(resolution: int = 800, spec: TestcaseSpec | None = None,
                         rho_variant: str = "constraint",
                         quad_degree: int = DEFAULT_QUAD_DEGREE) -> Setup:
    """Cold bubble in an isentropic atmosphere.

    ``rho_variant="constraint"`` keeps ``rho * theta`` unchanged by the
    perturbation (density ``rho_b theta_b / theta_0``); ``"text"`` uses
    ``rho_b theta_0 / theta_b`` instead.
    """
    if spec is None:
        if resolution not in STRAKA_RESOLUTIONS:
            raise ValueError(f"resolution must be one of {sorted(STRAKA_RESOLUTIONS)}")
        nc, nl, dt = STRAKA_RESOLUTIONS[resolution]
        spec = get_case("straka").with_overrides(ncols=nc, nlayers=nl, dt=dt)
    if rho_variant not in ("constraint", "text"):
        raise ValueError("rho_variant must be 'constraint' or 'text'")
    mesh = _mesh(spec)
    Vt, theta_b, rho_b, _ = _balanced_background(spec, mesh, quad_degree)
    V2 = FunctionSpace(mesh, "density_dgq1", quad_degree)
    c = spec.constants
    _, _, x, z, _ = Vt.cell_tables
    rq = V2.at_quadrature(rho_b)
    tq = Vt.at_quadrature(theta_b)
    p = spec.perturbation
    dT = straka_temperature(x, z, p["xc"], p["xr"], p["zc"], p["zr"])
    dth = Vt.project_values(dT / exner(rq, tq, c))
    theta0 = Field("theta_space", theta_b.coefficients + dth.coefficients)
    t0q = Vt.at_quadrature(theta0)
    if rho_variant == "constraint":
        rho0 = V2.project_values(rq * tq / t0q)
    else:
        rho0 = V2.project_values(rq * t0q / tq)
    state = State(_wind(mesh, spec.initial_wind, quad_degree), rho0, theta0)
    return Setup(spec, mesh, state, spec.model_params(), theta_b, rho_b)


def init_mountain(regime: str = "nonhydrostatic", spec: TestcaseSpec | None = None,
                  quad_degree: int = DEFAULT_QUAD_DEGREE) -> Setup:
    """Uniform wind impinging on an isolated ridge, with an absorbing lid."""
    if spec is None:
        spec = get_case({"nonhydrostatic": "mtn_nh", "hydrostatic": "mtn_h"}[regime])
    mesh = _mesh(spec)
    _, theta_b, rho_b, pi_top = _balanced_background(spec, mesh, quad_degree)
    params = spec.model_params()
    uy = Field("y_velocity_dgq1", np.zeros(FunctionSpace(mesh, "y_velocity_dgq1").dim)) if params.has_y_velocity else None
    state = State(_wind(mesh, spec.initial_wind, quad_degree), rho_b.copy(), theta_b.copy(), uy)
    return Setup(spec, mesh, state, params, theta_b, rho_b, pi_top)


def init_schar(dt: float = 8.0, spec: TestcaseSpec | None = None,
               quad_degree: int = DEFAULT_QUAD_DEGREE) -> Setup:
    if spec is None:
        spec = get_case("schar").with_overrides(dt=dt)
    return init_mountain(spec=spec, quad_degree=quad_degree)


def init_case(spec: TestcaseSpec | str, quad_degree: int = DEFAULT_QUAD_DEGREE, **kwargs) -> Setup:
    """Initialise any named case (optionally with overrides already applied)."""
    if isinstance(spec, str):
        spec = get_case(spec)
    if spec.name.startswith("gw"):
        return init_gravity_wave(spec=spec, quad_degree=quad_degree, **kwargs)
    if spec.name == "straka":
        return init_density_current(spec=spec, quad_degree=quad_degree, **kwargs)
    return init_mountain(spec=spec, quad_degree=quad_degree)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------
def front_location(theta: Field, theta_b: Field, mesh: ExtrudedMesh, threshold: float = -1e-8) -> float:
    """Largest right-edge x over cells holding a negative perturbation.

    Returns the left end of the domain when no cell qualifies.
    """
    from .femspace import build_dofmap
    c2g = build_dofmap("theta_space", mesh).cell_to_global
    d = theta.coefficients - theta_b.coefficients
    cold = np.min(d[c2g], axis=1) < threshold
    if not np.any(cold):
        return float(mesh.x_offset)
    cols = mesh.cell_column(np.nonzero(cold)[0])
    return float(mesh.x_offset + (np.max(cols) + 1) * mesh.dx)


def perturbation_extrema(theta: Field, theta_b: Field) -> tuple:
    """Minimum and maximum of ``theta - theta_b`` over the nodal points."""
    d = theta.coefficients - theta_b.coefficients
    return float(d.min()), float(d.max())


def diagnostics(model: SliceModel, x: np.ndarray, theta_b: Field) -> dict:
    """Summary quantities of a monolithic state vector."""
    theta = Field("theta_space", x[model.slice("theta")])
    tmin, tmax = perturbation_extrema(theta, theta_b)
    u = model.spaces["u"].at_quadrature(x[model.slice("u")])
    return {
        "mass": model.total_mass(x),
        "theta_pert_min": tmin,
        "theta_pert_max": tmax,
        "front_location": front_location(theta, theta_b, model.mesh),
        "w_min": float(u[..., 1].min()),
        "w_max": float(u[..., 1].max()),
    }
