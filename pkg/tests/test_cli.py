import csv

import numpy as np
import pytest

from slicefem import cli
from slicefem.cli import RunConfig, export_fields, load_config, main, run
from slicefem.femspace import FunctionSpace
from slicefem.solver import NewtonError, Stepper
from slicefem.testcases import init_gravity_wave, get_case


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_list_cases(capsys):
    assert main(["list-cases"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in out] == ["gw_h", "gw_nh", "mtn_h", "mtn_nh", "schar", "straka"]


def test_invalid_case_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "nonexistent", "--out-dir", str(tmp_path)])
    assert exc.value.code != 0
    with pytest.raises(SystemExit):
        main(["run", "--out-dir", str(tmp_path)])


def test_invalid_overrides():
    with pytest.raises(ValueError):
        RunConfig("gw_nh", dt=-1.0)
    with pytest.raises(ValueError):
        RunConfig("gw_nh", ncols=0)
    with pytest.raises(ValueError):
        RunConfig("gw_nh", gmres_tol=0.0)


def test_dt_override_step_count():
    assert RunConfig("gw_nh").spec().nsteps == 250
    assert RunConfig("gw_nh", dt=6.0).spec().nsteps == 500


def test_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("case = straka\nncols = 32\ndt = 2.5\nbinary = yes\nout-dir = somewhere\n")
    cfg = load_config(p)
    assert cfg == {"case": "straka", "ncols": 32, "dt": 2.5, "binary": True, "out_dir": "somewhere"}
    p.write_text("[run]\ncase = gw_nh\nbogus = 1\n")
    with pytest.raises(ValueError):
        load_config(p)


def _short(tmp_path, name="out", extra=()):
    out = tmp_path / name
    args = ["run", "gw_nh", "--ncols", "20", "--dt", "6", "--t-end", "36", "--out-dir", str(out),
            "--sample-nx", "20", "--sample-nz", "5", *extra]
    return main(args), out


def test_short_run_outputs(tmp_path, capsys):
    code, out = _short(tmp_path)
    assert code == 0
    rows = _rows(out / "diagnostics.csv")
    assert len(rows) == 6
    assert list(rows[0]) == cli.DIAGNOSTIC_COLUMNS
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    summary = capsys.readouterr().out.strip().splitlines()
    assert len(summary) == 1 and "GMRES its/step" in summary[0]
    header = [l for l in (out / "fields_final.txt").read_text().splitlines() if l.startswith("#")]
    keys = {l[2:].split(":")[0] for l in header}
    assert {"testcase", "build", "dt", "ncols", "nlayers", "time", "columns"} <= keys
    data = np.loadtxt(out / "fields_final.txt")
    assert data.shape == (100, 6)


def test_run_is_reproducible(tmp_path):
    _, a = _short(tmp_path, "a")
    _, b = _short(tmp_path, "b")
    for f in ("diagnostics.csv", "fields_final.txt"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_cadence_and_resume(tmp_path):
    out = tmp_path / "r"
    cfg = RunConfig("gw_nh", ncols=20, dt=6.0, t_end=24.0, out_dir=str(out), output_every=2,
                    checkpoint_every=2, sample_nx=10, sample_nz=4)
    assert run(cfg) == 0
    assert sorted(p.name for p in out.glob("fields_0*.txt")) == ["fields_000002.txt", "fields_000004.txt"]
    with np.load(out / "checkpoint.npz") as ck:
        assert int(ck["step"]) == 4
    cfg2 = RunConfig("gw_nh", ncols=20, dt=6.0, t_end=36.0, out_dir=str(out), resume=True,
                     sample_nx=10, sample_nz=4)
    assert run(cfg2) == 0
    rows = _rows(out / "diagnostics.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert float(rows[-1]["time"]) == pytest.approx(36.0)


def test_resume_matches_straight_run(tmp_path):
    _, straight = _short(tmp_path, "s")
    out = tmp_path / "p"
    run(RunConfig("gw_nh", ncols=20, dt=6.0, t_end=18.0, out_dir=str(out), checkpoint_every=3,
                  sample_nx=20, sample_nz=5))
    run(RunConfig("gw_nh", ncols=20, dt=6.0, t_end=36.0, out_dir=str(out), resume=True,
                  sample_nx=20, sample_nz=5))
    a = np.loadtxt(straight / "fields_final.txt")
    b = np.loadtxt(out / "fields_final.txt")
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_solver_failure_keeps_checkpoint(tmp_path, monkeypatch):
    original = Stepper.step

    def failing(self, x, dt):
        if len(self.history) == 2:
            raise NewtonError("forced")
        return original(self, x, dt)

    monkeypatch.setattr(Stepper, "step", failing)
    out = tmp_path / "f"
    code = run(RunConfig("gw_nh", ncols=20, dt=6.0, t_end=36.0, out_dir=str(out)))
    assert code == 2
    with np.load(out / "checkpoint.npz") as ck:
        assert int(ck["step"]) == 2
    assert len(_rows(out / "diagnostics.csv")) == 2


def test_export_rest_state(tmp_path):
    s = init_gravity_wave("nonhydrostatic", get_case("gw_nh").with_overrides(ncols=20), perturb=False, wind=0.0)
    m = s.model()
    x = m.state_to_vector(s.state)
    p = export_fields(m, x, s.theta_b, tmp_path / "rest.txt", 30, 10, {"testcase": "gw_nh"})
    data = np.loadtxt(p)
    assert np.abs(data[:, 2]).max() <= 1e-12
    assert np.abs(data[:, 3]).max() <= 1e-12
    assert np.all(data[:, 4] > 0) and np.all((data[:, 5] > 0) & (data[:, 5] <= 1.0 + 1e-12))


def test_export_analytic_theta(tmp_path):
    spec = get_case("gw_nh").with_overrides(ncols=60, nlayers=10)
    s = init_gravity_wave("nonhydrostatic", spec, perturb=False)
    m = s.model()
    x = m.state_to_vector(s.state)
    Vt = FunctionSpace(s.mesh, "theta_space")
    bump = Vt.project(lambda X, Z: np.sin(np.pi * Z / spec.H))
    x[m.slice("theta")] += bump.coefficients
    data = np.loadtxt(export_fields(m, x, s.theta_b, tmp_path / "a.txt", 40, 20))
    err = np.abs(data[:, 3] - np.sin(np.pi * data[:, 1] / spec.H)).max()
    assert err <= 5e-3


def test_export_binary(tmp_path):
    s = init_gravity_wave("nonhydrostatic", get_case("gw_nh").with_overrides(ncols=20))
    m = s.model()
    p = export_fields(m, m.state_to_vector(s.state), s.theta_b, tmp_path / "f.txt", 8, 4,
                      {"testcase": "gw_nh"}, binary=True)
    assert p.suffix == ".npz"
    with np.load(p) as d:
        assert set(d.files) >= {"x", "z", "w", "dtheta", "rho", "exner", "metadata"}
        assert d["w"].shape == (32,)
        assert "testcase=gw_nh" in list(d["metadata"])


def test_build_id_nonempty():
    assert cli.build_id()
