"""Command-line driver.

``slicefem list-cases`` prints the available benchmarks and
``slicefem run <case>`` integrates one of them, writing a per-step
diagnostics CSV, sampled fields and checkpoints into an output directory.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .femspace import FunctionSpace
from .forms import EvaluationError, exner
from .solver import NewtonError, PatchFactorizationError, SolverConfig, Stepper
from .testcases import diagnostics, get_case, init_case, list_cases

__all__ = ["RunConfig", "load_config", "run", "export_fields", "build_id", "main"]

log = logging.getLogger("slicefem")

DIAGNOSTIC_COLUMNS = [
    "step", "time", "newton_its", "gmres_its", "initial_residual", "final_residual",
    "mass", "theta_pert_min", "theta_pert_max", "w_min", "w_max", "front_location",
]


@dataclass
class RunConfig:
    case: str
    ncols: int | None = None
    nlayers: int | None = None
    dt: float | None = None
    t_end: float | None = None
    threads: int = 1
    out_dir: str = "output"
    output_every: int = 0
    checkpoint_every: int = 0
    newton_tol: float = 1e-8
    gmres_tol: float = 1e-6
    sample_nx: int = 200
    sample_nz: int = 50
    binary: bool = False
    resume: bool = False

    def __post_init__(self):
        get_case(self.case)
        for name in ("ncols", "nlayers"):
            v = getattr(self, name)
            if v is not None and int(v) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("dt", "t_end"):
            v = getattr(self, name)
            if v is not None and not float(v) > 0:
                raise ValueError(f"{name} must be positive")
        if self.threads < 1 or self.output_every < 0 or self.checkpoint_every < 0:
            raise ValueError("threads must be positive and cadences non-negative")
        if not (self.newton_tol > 0 and self.gmres_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.sample_nx < 1 or self.sample_nz < 1:
            raise ValueError("sample grid must have at least one point per direction")

    def spec(self):
        return get_case(self.case).with_overrides(ncols=self.ncols, nlayers=self.nlayers,
                                                  dt=self.dt, t_end=self.t_end)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _convert(name: str, value: str):
    kind = str(_FIELD_TYPES[name])
    if "bool" in kind:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return value.strip()


def load_config(path) -> dict:
    """Read ``key = value`` lines (an optional ``[run]`` header is allowed)."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    cp = configparser.ConfigParser()
    cp.read_string(text)
    out = {}
    for key, value in cp["run"].items():
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown configuration key {key!r}")
        out[key] = _convert(key, value)
    return out


def build_id() -> str:
    """Short commit hash of the source tree, or the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def export_fields(model, x, theta_b, path, nx: int = 200, nz: int = 50, metadata: dict | None = None,
                  binary: bool = False) -> Path:
    """Sample w, theta perturbation, density and Exner pressure on a uniform grid.

    Writes a whitespace-separated table with ``#``-prefixed metadata, or an
    ``.npz`` archive when ``binary`` is true.
    """
    mesh = model.mesh
    xs = mesh.x_offset + (np.arange(nx) + 0.5) * mesh.Lx / nx
    zs = (np.arange(nz) + 0.5) * mesh.H / nz
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    X, Z = X.ravel(), Z.ravel()
    V1, V2, Vt = model.spaces["u"], model.spaces["rho"], model.spaces["theta"]
    w = V1.evaluate(x[model.slice("u")], X, Z)[:, 1]
    th = Vt.evaluate(x[model.slice("theta")], X, Z)
    dth = th - Vt.evaluate(theta_b, X, Z)
    rho = V2.evaluate(x[model.slice("rho")], X, Z)
    pi = exner(rho, th, model.params.constants)
    meta = dict(metadata or {})
    meta.update(ncols=mesh.ncols, nlayers=mesh.nlayers, nx=nx, nz=nz)
    path = Path(path)
    if binary:
        path = path.with_suffix(".npz")
        np.savez(path, x=X, z=Z, w=w, dtheta=dth, rho=rho, exner=pi,
                 metadata=np.array([f"{k}={v}" for k, v in meta.items()]))
        return path
    with open(path, "w") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        fh.write("# columns: x z w dtheta rho exner\n")
        np.savetxt(fh, np.column_stack([X, Z, w, dth, rho, pi]), fmt="%.10e")
    return path


def _save_checkpoint(path: Path, x, step: int, t: float):
    tmp = path.with_name(path.stem + ".tmp.npz")
    np.savez(tmp, x=x, step=step, time=t)
    tmp.replace(path)


def run(config: RunConfig) -> int:
    """Integrate a testcase to its end time; returns a process exit status."""
    spec = config.spec()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    setup = init_case(spec)
    model = setup.model()
    solver_cfg = SolverConfig(newton_tol_abs=config.newton_tol, gmres_tol_rel=config.gmres_tol)
    stepper = Stepper(model, solver_cfg)
    x = model.state_to_vector(setup.state)
    start = 0
    ckpt = out / "checkpoint.npz"
    diag_path = out / "diagnostics.csv"
    if config.resume and ckpt.exists():
        data = np.load(ckpt)
        x, start = data["x"], int(data["step"])
        stepper.time = float(data["time"])
        log.info("resuming %s from step %d", spec.name, start)
    meta = {"testcase": spec.name, "build": build_id(), "dt": spec.dt}
    mode = "a" if start > 0 else "w"
    nsteps = spec.nsteps
    with open(diag_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS)
        if mode == "w":
            writer.writeheader()
        for n in range(start, nsteps):
            try:
                x_new = stepper.step(x, spec.dt)
            except (NewtonError, PatchFactorizationError, EvaluationError, np.linalg.LinAlgError) as exc:
                log.error("step %d failed: %s", n + 1, exc)
                _save_checkpoint(ckpt, x, n, stepper.time)
                fh.flush()
                return 2
            x = x_new
            rec = stepper.history[-1].as_record()
            rec["step"] = n + 1
            rec.update(diagnostics(model, x, setup.theta_b))
            writer.writerow({k: rec[k] for k in DIAGNOSTIC_COLUMNS})
            fh.flush()
            if config.output_every and (n + 1) % config.output_every == 0:
                export_fields(model, x, setup.theta_b, out / f"fields_{n + 1:06d}.txt",
                              config.sample_nx, config.sample_nz, {**meta, "time": stepper.time},
                              config.binary)
            if config.checkpoint_every and (n + 1) % config.checkpoint_every == 0:
                _save_checkpoint(ckpt, x, n + 1, stepper.time)
    export_fields(model, x, setup.theta_b, out / "fields_final.txt", config.sample_nx, config.sample_nz,
                  {**meta, "time": stepper.time}, config.binary)
    hist = stepper.history
    newton = np.mean([h.newton_its for h in hist]) if hist else 0.0
    gmres = np.mean([h.gmres_its for h in hist]) if hist else 0.0
    print(f"{spec.name}: {nsteps} steps of {spec.dt:g}s on {spec.ncols}x{spec.nlayers}, "
          f"newton its/step {newton:.3f}, GMRES its/step {gmres:.3f}, "
          f"wall {time.perf_counter() - t0:.1f}s")
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slicefem", description="Vertical-slice compressible Euler solver")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("list-cases", help="list available testcases")
    r = sub.add_parser("run", help="run a testcase")
    r.add_argument("case", nargs="?", help="testcase name (see list-cases)")
    r.add_argument("--config", help="key = value configuration file")
    r.add_argument("--ncols", type=int)
    r.add_argument("--nlayers", type=int)
    r.add_argument("--dt", type=float)
    r.add_argument("--t-end", type=float)
    r.add_argument("--threads", type=int)
    r.add_argument("--out-dir")
    r.add_argument("--output-every", type=int)
    r.add_argument("--checkpoint-every", type=int)
    r.add_argument("--newton-tol", type=float)
    r.add_argument("--gmres-tol", type=float)
    r.add_argument("--sample-nx", type=int)
    r.add_argument("--sample-nz", type=int)
    r.add_argument("--binary", action="store_true", default=None)
    r.add_argument("--resume", action="store_true", default=None)
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    if args.command == "list-cases":
        for name in list_cases():
            s = get_case(name)
            print(f"{name:8s} {s.ncols}x{s.nlayers} dt={s.dt:g}s t_end={s.t_end:g}s")
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    values = load_config(args.config) if args.config else {}
    cli = {k: v for k, v in vars(args).items()
           if k in _FIELD_TYPES and v is not None}
    values.update(cli)
    if "case" not in values:
        parser.error("a testcase name is required")
    try:
        config = RunConfig(**values)
    except (KeyError, ValueError) as exc:
        parser.error(str(exc).strip("'\""))
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
