"""Configuration files, VTK/CSV output and the ``mclsim`` command line.

Configuration files use ``[section]`` headers and ``key = value`` lines.
Unknown keys are rejected so that typos cannot silently fall back to a
default.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (ExperimentSpec, PRESETS, SteadyStateDetector, make_discretization,
                          initial_state, preset, run_accuracy)
from .linalg import SolverError
from .mesh import Mesh, WallTag, refine_uniform
from .model import PhysParams, StabSpec, Wall, WallSpec, required_S
from .stepper import SimState, SolverOptions, StepReport

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ENERGY = 0, 1, 2, 3

CSV_COLUMNS = ("step", "t", "E_kin", "E_grad", "E_q", "E_surf", "E_total", "grad_p_term",
               "D_visc", "D_phi", "D_slip", "energy_residual", "mass", "xi",
               "cg_iters_phase", "solver_iters_velocity", "cg_iters_projection")

WALL_NAMES = ("left", "right", "bottom", "top")
WALL_FIELDS = ("theta_s", "slip_l", "u_wall", "active_sclc")


# --------------------------------------------------------------------------
# configuration schema

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _int(s: str) -> int:
    v = float(s)
    if v != int(v):
        raise ValueError(f"expected an integer, got {s!r}")
    return int(v)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _str(s: str) -> str:
    return s.strip()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(format_number(x) for x in v)
    if isinstance(v, (int, float)):
        return format_number(v)
    return str(v)


def _wall_keys():
    keys = {}
    conv = {"theta_s": float, "slip_l": float, "u_wall": float, "active_sclc": _bool}
    for f in WALL_FIELDS:
        keys[f] = (conv[f], None)
        for w in WALL_NAMES:
            keys[f"{f}_{w}"] = (conv[f], None)
    return keys


# section -> key -> (converter, default); None means "not set"
SCHEMA: dict[str, dict] = {
    "domain": {"Lx": (float, None), "Ly": (float, None), "nx": (_int, None), "ny": (_int, None)},
    "time": {"dt": (float, 1e-3), "T": (float, 1.0), "output_every": (_int, 0)},
    "model": {"nu": (float, 1.0), "lambda": (float, 0.1), "M": (float, 0.001), "eps": (float, 0.025),
              "g0": (float, 0.0), "S_mode": (_str, "auto"), "S_value": (float, None)},
    "walls": _wall_keys(),
    "init": {"kind": (_str, None), "smoothing": (_str, "sharp"), "center": (_floats, (2.0, 0.0)),
             "radius": (float, 0.8), "band_halfwidth": (float, 1.0), "value": (float, 1.0)},
    "solver": {"tol": (float, 1e-12), "maxit": (_int, 20000), "inner_tol": (float, 1e-14),
               "schur_precond": (_str, "amg")},
    "output": {"dir": (_str, "out"), "vtk": (_bool, True), "csv": (_bool, True)},
    "experiment": {"kind": (_str, "run"), "dt_list": (_floats, ()), "gamma": (float, None),
                   "stop_at_steady": (_bool, False)},
}
REQUIRED = {("domain", "Lx"), ("domain", "Ly"), ("domain", "nx"), ("domain", "ny")}

WALL_DEFAULTS = {"theta_s": 90.0, "slip_l": 1 / 0.19, "u_wall": 0.0, "active_sclc": True}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists one message per problem."""

    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class Config:
    """Validated configuration: ``values[section][key]`` with defaults filled in."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def wall(self, name: str) -> Wall:
        w = self.values["walls"]
        kw = {}
        for f in WALL_FIELDS:
            v = w.get(f"{f}_{name}")
            if v is None:
                v = w.get(f)
            kw[f] = WALL_DEFAULTS[f] if v is None else v
        return Wall(**kw)

    def wall_spec(self) -> WallSpec:
        return WallSpec(*(self.wall(n) for n in WALL_NAMES))

    def params(self) -> PhysParams:
        m = self.values["model"]
        return PhysParams(nu=m["nu"], lam=m["lambda"], M=m["M"], eps=m["eps"], g0=m["g0"],
                          dt=self.values["time"]["dt"])

    def stab(self) -> StabSpec:
        m = self.values["model"]
        return StabSpec(m["S_mode"], m["S_value"])

    def solver(self) -> SolverOptions:
        s = self.values["solver"]
        return SolverOptions(tol=s["tol"], maxit=s["maxit"], inner_tol=s["inner_tol"],
                             schur_precond=s["schur_precond"])

    def experiment(self) -> ExperimentSpec:
        v = self.values
        d, t, i, e = v["domain"], v["time"], v["init"], v["experiment"]
        kind = "accuracy" if e["kind"] == "accuracy" else i["kind"]
        return ExperimentSpec(
            kind=kind, Lx=d["Lx"], Ly=d["Ly"], nx=d["nx"], ny=d["ny"], params=self.params(),
            walls=self.wall_spec(), stab=self.stab(), smoothing=i["smoothing"],
            center=tuple(i["center"]), radius=i["radius"], band_halfwidth=i["band_halfwidth"],
            value=i["value"], T=t["T"], output_every=t["output_every"],
            dt_list=tuple(e["dt_list"]), stop_at_steady=e["stop_at_steady"], gamma=e["gamma"])


def _line_index(text: str) -> dict:
    """Map (section, key) to its 1-based line number."""
    where = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            where.setdefault((section, None), no)
            continue
        for sep in ("=", ":"):
            if sep in line:
                key = line.split(sep, 1)[0].strip()
                where.setdefault((section, key), no)
                break
    return where


def parse_config(text: str) -> Config:
    """Parse and validate configuration text.

    Raises
    ------
    ConfigError
        Listing every unknown key, missing required key, malformed value and
        constraint violation, each with its line number where one exists.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   strict=True, empty_lines_in_values=False)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax error: {exc}"]) from None
    where = _line_index(text)
    errors: list[str] = []

    def at(section, key=None):
        no = where.get((section, key))
        return f"line {no}: " if no else ""

    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            errors.append(f"{at(section)}unknown section [{section}]")
            continue
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                errors.append(f"{at(section, key)}unknown key '{key}' in [{section}]")
                continue
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                errors.append(f"{at(section, key)}bad value for '{key}': {exc}")
    for section, key in sorted(REQUIRED):
        if not cp.has_option(section, key):
            errors.append(f"{at(section)}missing required key '{key}' in [{section}]")
    if errors:
        raise ConfigError(errors)

    _defaults_for_kind(values)
    errors += _validate(values, at)
    if errors:
        raise ConfigError(errors)
    return Config(values)


def _defaults_for_kind(values: dict) -> None:
    init, exp = values["init"], values["experiment"]
    if init["kind"] is None:
        init["kind"] = "exact" if exp["kind"] == "accuracy" else "droplet"


def _validate(values: dict, at) -> list[str]:
    errors = []

    def check(cond, section, key, msg):
        if not cond:
            errors.append(f"{at(section, key)}{msg}")

    d, t, m, i, e, s = (values[k] for k in ("domain", "time", "model", "init", "experiment", "solver"))
    check(d["Lx"] > 0, "domain", "Lx", "Lx must be positive")
    check(d["Ly"] > 0, "domain", "Ly", "Ly must be positive")
    check(d["nx"] >= 1, "domain", "nx", "nx must be >= 1")
    check(d["ny"] >= 1, "domain", "ny", "ny must be >= 1")
    check(t["dt"] > 0, "time", "dt", "dt must be positive")
    check(t["T"] > 0, "time", "T", "T must be positive")
    check(t["output_every"] >= 0, "time", "output_every", "output_every must be >= 0")
    for k in ("nu", "lambda", "M", "eps"):
        check(m[k] > 0, "model", k, f"{k} must be positive")
    check(e["kind"] in ("run", "accuracy"), "experiment", "kind", "experiment kind must be 'run' or 'accuracy'")
    check(i["kind"] in ("droplet", "couette", "constant", "exact"), "init", "kind",
          "init kind must be droplet, couette, constant or exact")
    check(i["kind"] != "exact" or e["kind"] == "accuracy", "init", "kind",
          "init kind 'exact' is only available with [experiment] kind = accuracy")
    check(i["smoothing"] in ("sharp", "tanh"), "init", "smoothing", "smoothing must be 'sharp' or 'tanh'")
    check(len(i["center"]) == 2, "init", "center", "center needs two coordinates")
    check(s["schur_precond"] in ("amg", "jacobi", "none"), "solver", "schur_precond",
          "schur_precond must be amg, jacobi or none")
    check(s["tol"] > 0 and s["inner_tol"] > 0, "solver", "tol", "solver tolerances must be positive")
    if e["kind"] == "accuracy":
        dts = e["dt_list"]
        check(len(dts) >= 2 and all(b < a for a, b in zip(dts, dts[1:])), "experiment", "dt_list",
              "dt_list must hold at least two strictly decreasing time steps")
    w = values["walls"]
    for key, v in w.items():
        if v is None:
            continue
        if key.startswith("theta_s"):
            check(0 < v < 180, "walls", key, f"{key} must lie in (0, 180) degrees")
        elif key.startswith("slip_l"):
            check(v >= 0, "walls", key, f"{key} must be >= 0")
    check(m["S_mode"] in ("auto", "explicit"), "model", "S_mode", "S_mode must be 'auto' or 'explicit'")
    if m["S_mode"] == "explicit":
        if m["S_value"] is None:
            errors.append(f"{at('model', 'S_mode')}S_mode = explicit requires S_value")
        elif not errors:
            need = required_S(Config(values).wall_spec())
            check(m["S_value"] >= need * (1 - 1e-12), "model", "S_value",
                  f"S_value = {m['S_value']} violates S >= Lbar/2 = {need:.12g} for the configured contact angles")
    if not errors and i["kind"] == "droplet" and e["kind"] == "run":
        try:
            Config(values).experiment()
        except ValueError as exc:
            errors.append(f"{at('init', 'radius')}{exc}")
    return errors


def serialize_config(cfg: Config) -> str:
    """Text form of a configuration; parsing it gives back an equal :class:`Config`."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = cfg.values[section][key]
            if v is None or (isinstance(v, tuple) and not v):
                continue
            lines.append(f"{key} = {_fmt(v)}")
        lines.append("")
    return "\n".join(lines)


def preset_config(name: str) -> Config:
    """Configuration equivalent of a named preset."""
    spec = preset(name)
    v = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    v["domain"].update(Lx=spec.Lx, Ly=spec.Ly, nx=spec.nx, ny=spec.ny)
    P = spec.params
    v["time"].update(dt=P.dt if spec.kind != "accuracy" else spec.dt_list[-1], T=spec.T)
    v["model"].update(nu=P.nu, M=P.M, eps=P.eps, g0=P.g0, S_mode=spec.stab.mode, S_value=spec.stab.value)
    v["model"]["lambda"] = P.lam
    for name_, w in zip(WALL_NAMES, (spec.walls.left, spec.walls.right, spec.walls.bottom, spec.walls.top)):
        for f in WALL_FIELDS:
            v["walls"][f"{f}_{name_}"] = getattr(w, f)
    kind = "exact" if spec.kind == "accuracy" else spec.kind
    v["init"].update(kind=kind, smoothing=spec.smoothing, center=tuple(spec.center), radius=spec.radius,
                     band_halfwidth=spec.band_halfwidth, value=spec.value)
    v["experiment"].update(kind="accuracy" if spec.kind == "accuracy" else "run",
                           dt_list=tuple(spec.dt_list), gamma=spec.gamma, stop_at_steady=spec.stop_at_steady)
    return parse_config(serialize_config(Config(v)))


# --------------------------------------------------------------------------
# output

def format_number(x) -> str:
    """Shortest decimal that reads back to the same double (integers without '.0')."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def interpolate_coarse_to_fine(coarse: Mesh, fine: Mesh, p: np.ndarray) -> np.ndarray:
    """Evaluate a coarse P1 field at the fine nodes."""
    out = np.empty(fine.n_nodes)
    out[:coarse.n_nodes] = p
    parent = fine.parent_map
    ctri = coarse.triangles[parent]                # (Tf,3)
    cp = coarse.nodes[ctri]                        # (Tf,3,2)
    fp = fine.nodes[fine.triangles]                # (Tf,3,2)
    d1 = cp[:, 1] - cp[:, 0]
    d2 = cp[:, 2] - cp[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    r = fp - cp[:, None, 0]
    l1 = (r[..., 0] * d2[:, None, 1] - r[..., 1] * d2[:, None, 0]) / det[:, None]
    l2 = (d1[:, None, 0] * r[..., 1] - d1[:, None, 1] * r[..., 0]) / det[:, None]
    vals = (1 - l1 - l2) * p[ctri[:, None, 0]] + l1 * p[ctri[:, None, 1]] + l2 * p[ctri[:, None, 2]]
    out[fine.triangles.ravel()] = vals.ravel()
    out[:coarse.n_nodes] = p
    return out


def write_vtk(state: SimState, mesh: Mesh, path, coarse: Mesh | None = None) -> None:
    """Legacy ASCII VTK snapshot of a state on the fine mesh ``mesh``.

    ``coarse`` is the pressure mesh; when omitted the pressure is assumed to
    live on the coarse nodes, which are the leading fine nodes.
    """
    path = Path(path)
    N = mesh.n_nodes
    if coarse is not None:
        p_fine = interpolate_coarse_to_fine(coarse, mesh, state.p)
    elif len(state.p) == N:
        p_fine = state.p
    else:
        raise ValueError("pressure mesh required to interpolate the pressure")
    f = format_number
    lines = ["# vtk DataFile Version 3.0", f"mclsim t={f(state.t)}", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {N} double"]
    lines += [f"{f(x)} {f(y)} 0" for x, y in mesh.nodes]
    T = mesh.n_triangles
    lines.append(f"CELLS {T} {4 * T}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {T}")
    lines += ["5"] * T
    lines.append(f"POINT_DATA {N}")
    for name, vals in (("phi", state.phi), ("q", state.q), ("p_interp", p_fine)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f(v) for v in vals]
    lines.append("VECTORS velocity double")
    lines += [f"{f(a)} {f(b)} 0" for a, b in zip(state.u[:N], state.u[N:])]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc


def write_csv(rows, path) -> None:
    """Write per-step diagnostics (StepReport objects or dicts) with a fixed header."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in rows:
                get = r.get if isinstance(r, dict) else (lambda k, r=r: getattr(r, k))
                w.writerow([format_number(get(k)) for k in CSV_COLUMNS])
    except OSError as exc:
        raise OSError(f"cannot write CSV file {path}: {exc}") from exc


# --------------------------------------------------------------------------
# command line

def _load(args) -> Config:
    if getattr(args, "preset", None):
        return preset_config(args.preset)
    if not args.config:
        raise ConfigError(["either --config or --preset is required"])
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {args.config}: {exc}"]) from None
    return parse_config(text)


def _simulate(cfg: Config, out: Path | None, steps: int | None, quiet: bool):
    spec = cfg.experiment()
    disc = make_discretization(spec, cfg.solver())
    state = initial_state(spec, disc)
    n_steps = steps if steps is not None else int(round(spec.T / spec.params.dt))
    write_vtk_ = out is not None and cfg["output"]["vtk"]
    every = spec.output_every
    if write_vtk_:
        write_vtk(state, disc.fine, out / "state_000000.vtk", disc.coarse)
    det = SteadyStateDetector()
    reports: list[StepReport] = []
    energy = None
    for n in range(1, n_steps + 1):
        state, rep, energy = disc.advance(state, n, energy)
        reports.append(rep)
        if write_vtk_ and every and n % every == 0:
            write_vtk(state, disc.fine, out / f"state_{n:06d}.vtk", disc.coarse)
        if not quiet and (n % max(1, n_steps // 20) == 0 or n == n_steps):
            print(f"step {n:6d}  t={state.t:.4f}  E_total={rep.E_total:.6e}  "
                  f"residual={rep.energy_residual:.3e}  mass={rep.mass:.12g}", flush=True)
        if det.update(rep.phi_rate, n) and spec.stop_at_steady:
            if not quiet:
                print(f"steady state reached at step {n} (t={state.t:.4f})")
            break
    if out is not None:
        if write_vtk_ and (not every or len(reports) % every):
            write_vtk(state, disc.fine, out / f"state_{len(reports):06d}.vtk", disc.coarse)
        if cfg["output"]["csv"]:
            write_csv(reports, out / "diagnostics.csv")
    return reports


def _cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    _simulate(cfg, out, args.steps, args.quiet)
    return EXIT_OK


def _cmd_accuracy(args) -> int:
    cfg = _load(args)
    spec = cfg.experiment()
    if spec.kind != "accuracy":
        raise ConfigError(["accuracy needs [experiment] kind = accuracy"])
    table = run_accuracy(spec, cfg.solver(),
                         progress=None if args.quiet else
                         lambda dt, e: print(f"dt={dt:g} done: " + ", ".join(f"{k}={v:.3e}" for k, v in e.items()),
                                             flush=True))
    print(table.format())
    return EXIT_OK


def _cmd_energy_check(args) -> int:
    cfg = _load(args)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reports = _simulate(cfg, out, args.steps, args.quiet)
    checked = [r for r in reports if r.energy_law_applies]
    if not checked:
        print("energy law not applicable (moving walls, gravity, forcing or S < Lbar/2); nothing checked")
        return EXIT_OK
    worst = max(checked, key=lambda r: r.energy_residual / r.energy_tol)
    bad = [r for r in checked if r.energy_residual > r.energy_tol]
    if bad:
        print(f"max energy residual > tol: {worst.energy_residual:.3e} > {worst.energy_tol:.3e} "
              f"at step {worst.step} ({len(bad)} of {len(checked)} steps violate)")
        return EXIT_ENERGY
    print(f"max energy residual ≤ tol: {max(r.energy_residual for r in checked):.3e} "
          f"over {len(checked)} steps (tol = 1e-8 * max(1, |E^n|))")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mclsim", description="Two-phase flow with moving contact lines.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", help="configuration file")
        src.add_argument("--preset", choices=PRESETS, help="built-in setup")
        p.add_argument("--steps", type=int, default=None, help="override the number of steps")
        p.add_argument("-q", "--quiet", action="store_true")
        if out:
            p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("run", help="run a simulation, writing VTK snapshots and CSV diagnostics")
    common(p)
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("accuracy", help="temporal convergence study of the manufactured solution")
    common(p, out=False)
    p.set_defaults(func=_cmd_accuracy)
    p = sub.add_parser("energy-check", help="run and verify the discrete energy inequality")
    common(p)
    p.set_defaults(func=_cmd_energy_check)
    p = sub.add_parser("version", help="print the version")
    p.set_defaults(func=lambda args: print(f"mclsim {__version__}") or EXIT_OK)
    return ap


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(cli_main())
