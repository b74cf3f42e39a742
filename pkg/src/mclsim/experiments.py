"""Initial conditions, manufactured solutions and measurement tools for the benchmark runs.

Three families of runs are supported: a manufactured smooth solution for
temporal convergence, a Couette shear flow with a vertical fluid band, and a
sessile droplet relaxing towards its static contact angle.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import fem
from .fem import geometry
from .mesh import Mesh, WallTag, build_rectangle, outward_normal, wall_line
from .model import PhysParams, StabSpec, Wall, WallSpec, bulk_f, surf_g1
from .stepper import Discretization, SimState, SolverOptions, StepReport

log = logging.getLogger(__name__)

PI = math.pi


# --------------------------------------------------------------------------
# manufactured solution

def exact_solution(t, x, y):
    """Smooth divergence-free reference solution on ``[0, 2]^2``.

    Returns ``(phi, u, v, p)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = np.sin(t)
    phi = 2.0 + np.cos(PI * x) * np.cos(PI * y) * s
    u = PI * np.sin(2 * PI * y) * np.sin(PI * x) ** 2 * s
    v = -PI * np.sin(2 * PI * x) * np.sin(PI * y) ** 2 * s
    p = np.cos(PI * x) * np.sin(PI * y) * s
    return phi, u, v, p


def _exact_derivatives(t, x, y):
    """Time derivatives, gradients and Laplacians of the reference solution."""
    s, c = np.sin(t), np.cos(t)
    Sx, Cx = np.sin(PI * x), np.cos(PI * x)
    Sy, Cy = np.sin(PI * y), np.cos(PI * y)
    S2x, C2x = np.sin(2 * PI * x), np.cos(2 * PI * x)
    S2y, C2y = np.sin(2 * PI * y), np.cos(2 * PI * y)
    d = {}
    d["phi_t"] = Cx * Cy * c
    d["phi_x"] = -PI * Sx * Cy * s
    d["phi_y"] = -PI * Cx * Sy * s
    d["phi_lap"] = -2 * PI ** 2 * Cx * Cy * s
    d["u_t"] = PI * S2y * Sx ** 2 * c
    d["u_x"] = PI ** 2 * S2y * S2x * s
    d["u_y"] = 2 * PI ** 2 * C2y * Sx ** 2 * s
    d["u_lap"] = 2 * PI ** 3 * S2y * C2x * s - 4 * PI ** 3 * S2y * Sx ** 2 * s
    d["v_t"] = -PI * S2x * Sy ** 2 * c
    d["v_x"] = -2 * PI ** 2 * C2x * Sy ** 2 * s
    d["v_y"] = -PI ** 2 * S2x * S2y * s
    d["v_lap"] = 4 * PI ** 3 * S2x * Sy ** 2 * s - 2 * PI ** 3 * S2x * C2y * s
    d["p_x"] = -PI * Sx * Sy * s
    d["p_y"] = PI * Cx * Cy * s
    return d


def manufactured_forcing(t, x, y, params: PhysParams, walls: WallSpec | None = None):
    """Forcing that makes :func:`exact_solution` solve the model with inhomogeneous wall data.

    Returns
    -------
    f : tuple of arrays
        Momentum body force ``(f_x, f_y)``.
    s : array
        Volume source of the phase equation.
    h_slip : dict
        Per-wall slip data ``nu d_n u_tau + l u_tau - l u_w`` at ``(x, y)``.
    h_sclc : dict
        Per-wall contact-line data ``eps d_n phi + g'(phi)`` at ``(x, y)``.

    Notes
    -----
    The Lagrange multiplier of the exact solution is taken as zero; its
    mass is constant in time so the constraint is consistent.
    """
    walls = walls or WallSpec.uniform()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    P = params
    phi, u, v, _ = exact_solution(t, x, y)
    d = _exact_derivatives(t, x, y)
    phidot = d["phi_t"] + u * d["phi_x"] + v * d["phi_y"]
    s = phidot - P.M * (P.eps * d["phi_lap"] - bulk_f(phi, P.eps))
    cpl = P.lam / P.M * phidot
    fx = d["u_t"] + u * d["u_x"] + v * d["u_y"] - P.nu * d["u_lap"] + d["p_x"] + cpl * d["phi_x"]
    fy = d["v_t"] + u * d["v_x"] + v * d["v_y"] - P.nu * d["v_lap"] + d["p_y"] + cpl * d["phi_y"]
    h_slip, h_sclc = {}, {}
    for tag, w in walls.items():
        n = outward_normal(tag)
        k = fem.tangential_component(tag)
        ut = (u, v)[k]
        gk = (d["u_x"], d["u_y"]) if k == 0 else (d["v_x"], d["v_y"])
        h_slip[tag] = P.nu * (n[0] * gk[0] + n[1] * gk[1]) + w.slip_l * (ut - w.u_wall)
        dn_phi = n[0] * d["phi_x"] + n[1] * d["phi_y"]
        h_sclc[tag] = P.eps * dn_phi + surf_g1(phi, w.theta_s)
    return (fx, fy), s, h_slip, h_sclc


class ManufacturedForcing:
    """Adapter exposing :func:`manufactured_forcing` to the stepper."""

    def __init__(self, params: PhysParams, walls: WallSpec):
        self.params = params
        self.walls = walls

    def phase_source(self, t, x, y):
        return manufactured_forcing(t, x, y, self.params, self.walls)[1]

    def momentum_source(self, t, x, y):
        fx, fy = manufactured_forcing(t, x, y, self.params, self.walls)[0]
        return np.stack([fx, fy], axis=-1)

    def slip_data(self, t, tag, x, y):
        return manufactured_forcing(t, x, y, self.params, self.walls)[2][tag]

    def sclc_data(self, t, tag, x, y):
        return manufactured_forcing(t, x, y, self.params, self.walls)[3][tag]


# --------------------------------------------------------------------------
# experiment description

@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to set up and run one experiment.

    ``kind`` is one of ``accuracy``, ``couette``, ``droplet``, ``constant``.
    ``smoothing`` selects a sharp +-1 indicator or a tanh profile of the
    signed distance for the initial phase field.
    """

    kind: str = "droplet"
    Lx: float = 4.0
    Ly: float = 1.2
    nx: int = 64
    ny: int = 20
    params: PhysParams = field(default_factory=PhysParams)
    walls: WallSpec = field(default_factory=WallSpec)
    stab: StabSpec = field(default_factory=StabSpec)
    smoothing: str = "sharp"
    center: tuple[float, float] = (2.0, 0.0)
    radius: float = 0.8
    band_halfwidth: float = 1.0
    value: float = 1.0
    T: float = 1.0
    output_every: int = 0
    dt_list: tuple[float, ...] = ()
    stop_at_steady: bool = False
    gamma: float | None = None      # provenance only, never read by the solver

    def __post_init__(self):
        if self.kind not in ("accuracy", "couette", "droplet", "constant"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.smoothing not in ("sharp", "tanh"):
            raise ValueError(f"smoothing must be 'sharp' or 'tanh', got {self.smoothing!r}")
        if self.T <= 0:
            raise ValueError("final time T must be positive")
        if self.kind == "droplet":
            cx, cy = self.center
            if self.radius <= 0 or cx - self.radius < 0 or cx + self.radius > self.Lx \
                    or cy + self.radius > self.Ly or cy - self.radius > self.Ly:
                raise ValueError("droplet does not fit inside the domain")
        if self.kind == "accuracy":
            dts = list(self.dt_list)
            if len(dts) < 2 or any(b >= a for a, b in zip(dts, dts[1:])):
                raise ValueError("dt_list must hold at least two strictly decreasing time steps")

    def mesh(self) -> Mesh:
        return build_rectangle(self.Lx, self.Ly, self.nx, self.ny)


def example1_params() -> PhysParams:
    return PhysParams(nu=1.0, lam=1e-7, M=0.001, eps=0.025, g0=0.0, dt=1e-2)


def preset(name: str) -> ExperimentSpec:
    """Named benchmark setups: ``accuracy``, ``couette``, ``dewetting``, ``wetting``."""
    name = name.lower()
    if name == "accuracy":
        return ExperimentSpec(
            kind="accuracy", Lx=2.0, Ly=2.0, nx=64, ny=64, params=example1_params(),
            walls=WallSpec.uniform(theta_s=90.0, slip_l=1 / 0.19), T=1.0,
            dt_list=(1e-2, 5e-3, 2.5e-3), gamma=1000.0)
    if name == "couette":
        moving = dict(theta_s=60.0, slip_l=1 / 0.19)
        walls = WallSpec(left=Wall(), right=Wall(),
                         bottom=Wall(u_wall=-0.7, **moving), top=Wall(u_wall=0.7, **moving))
        return ExperimentSpec(
            kind="couette", Lx=4.0, Ly=0.8, nx=64, ny=16,
            params=PhysParams(nu=1.0, lam=0.1, M=0.001, eps=0.025, dt=1e-3),
            walls=walls, band_halfwidth=1.0, T=5.0, stop_at_steady=True)
    if name in ("dewetting", "wetting"):
        theta = 150.0 if name == "dewetting" else 30.0
        return ExperimentSpec(
            kind="droplet", Lx=4.0, Ly=1.2, nx=64, ny=20,
            params=PhysParams(nu=1.0, lam=0.1, M=0.001, eps=0.025, dt=1e-3),
            walls=WallSpec.uniform(theta_s=theta, slip_l=1 / 0.19),
            center=(2.0, 0.0), radius=0.8, T=5.0, stop_at_steady=True)
    raise ValueError(f"unknown preset {name!r}; choose accuracy, couette, dewetting or wetting")


PRESETS = ("accuracy", "couette", "dewetting", "wetting")


# --------------------------------------------------------------------------
# initial states

def _profile(d, spec: ExperimentSpec):
    if spec.smoothing == "sharp":
        return np.where(d >= 0.0, 1.0, -1.0)
    return np.tanh(d / (math.sqrt(2.0) * spec.params.eps))


def _state(disc_or_mesh, phi, eps, u=None, t=0.0) -> SimState:
    fine, coarse = _meshes(disc_or_mesh)
    N = fine.n_nodes
    phi = np.asarray(phi, dtype=float)
    return SimState(t, np.zeros(2 * N) if u is None else u, np.zeros(coarse.n_nodes),
                    phi.copy(), (phi * phi - 1.0) / eps)


def _meshes(obj):
    if isinstance(obj, Discretization):
        return obj.fine, obj.coarse
    from .mesh import refine_uniform
    return refine_uniform(obj), obj


def init_droplet(spec: ExperimentSpec, disc=None) -> SimState:
    """Fluid 1 (phi = +1) inside a disc, fluid 2 outside; fluid at rest."""
    fine, _ = _meshes(disc or spec.mesh())
    x, y = fine.nodes.T
    d = spec.radius - np.hypot(x - spec.center[0], y - spec.center[1])
    return _state(disc or spec.mesh(), _profile(d, spec), spec.params.eps)


def init_couette(spec: ExperimentSpec, disc=None) -> SimState:
    """Fluid 1 in the vertical band ``|x - Lx/2| <= band_halfwidth``; fluid at rest."""
    fine, _ = _meshes(disc or spec.mesh())
    d = spec.band_halfwidth - np.abs(fine.nodes[:, 0] - 0.5 * spec.Lx)
    return _state(disc or spec.mesh(), _profile(d, spec), spec.params.eps)


def init_constant(value: float, mesh_or_disc, eps: float) -> SimState:
    fine, _ = _meshes(mesh_or_disc)
    return _state(mesh_or_disc, np.full(fine.n_nodes, float(value)), eps)


def init_exact(disc: Discretization, t: float = 0.0) -> SimState:
    """Nodal interpolant of the manufactured solution (pressure on the coarse mesh)."""
    x, y = disc.fine.nodes.T
    phi, u, v, _ = exact_solution(t, x, y)
    xc, yc = disc.coarse.nodes.T
    p = exact_solution(t, xc, yc)[3]
    U = np.concatenate([u, v])
    U[disc.vmask] = 0.0
    st = SimState(t, U, p - (disc.cgeo.lumped @ p) / disc.area, phi, (phi * phi - 1) / disc.params.eps)
    return st


def initial_state(spec: ExperimentSpec, disc: Discretization) -> SimState:
    if spec.kind == "droplet":
        return init_droplet(spec, disc)
    if spec.kind == "couette":
        return init_couette(spec, disc)
    if spec.kind == "constant":
        return init_constant(spec.value, disc, spec.params.eps)
    return init_exact(disc)


# --------------------------------------------------------------------------
# steady state

class SteadyStateDetector:
    """Flags steady state once ``||phi^{n+1} - phi^n|| / dt`` stays below ``tol`` for ``window`` steps."""

    def __init__(self, tol: float = 1e-4, window: int = 10):
        self.tol = tol
        self.window = window
        self.count = 0
        self.fired_at: int | None = None

    def update(self, rate: float, step: int | None = None) -> bool:
        self.count = self.count + 1 if rate < self.tol else 0
        if self.count >= self.window and self.fired_at is None:
            self.fired_at = step
        return self.count >= self.window


def detect_steady_state(history, dt: float, mesh: Mesh | None = None,
                        tol: float = 1e-4, window: int = 10) -> bool:
    """Steady-state test on a sequence of phase fields.

    ``history`` holds nodal phase fields (on ``mesh``, which defaults to
    plain Euclidean norms when omitted) at consecutive time levels.  Returns
    True when the last ``window`` increments all satisfy
    ``||phi^{n+1} - phi^n||_{L2} / dt < tol``.
    """
    history = [np.asarray(h, dtype=float) for h in history]
    if len(history) < window + 1:
        return False
    M = geometry(mesh) if mesh is not None else None
    det = SteadyStateDetector(tol, window)
    fired = False
    for a, b in zip(history[-window - 1:], history[-window:]):
        d = b - a
        nrm = math.sqrt(max(M.integrate(M.at_quad(d) ** 2), 0.0)) if M else float(np.linalg.norm(d))
        fired = det.update(nrm / dt)
    return fired


# --------------------------------------------------------------------------
# contact angle

def level_set_points(phi: np.ndarray, mesh: Mesh, level: float = 0.0) -> np.ndarray:
    """Points where the P1 field crosses ``level``, one per cut triangle edge and triangle."""
    tri = mesh.triangles
    f = phi[tri] - level
    pts = []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        fa, fb = f[:, a], f[:, b]
        # zeros count as the positive side so a node on the contour yields one point
        cut = (fa < 0) != (fb < 0)
        s = fa[cut] / (fa[cut] - fb[cut])
        pa = mesh.nodes[tri[cut, a]]
        pb = mesh.nodes[tri[cut, b]]
        pts.append(pa + s[:, None] * (pb - pa))
    return np.unique(np.round(np.vstack(pts), 12), axis=0)


def _wall_crossings(phi: np.ndarray, mesh: Mesh, wall: WallTag):
    """Zero crossings along a wall: list of (point, unit vector towards phi > 0)."""
    out = []
    for i, j in mesh.wall_edges([wall]):
        fa, fb = phi[i], phi[j]
        if (fa < 0) != (fb < 0):
            s = fa / (fa - fb)
            pa, pb = mesh.nodes[i], mesh.nodes[j]
            w = (pb - pa) if fb > 0 else (pa - pb)
            out.append((pa + s * (pb - pa), w / np.linalg.norm(w)))
    return out


def _fit_conic(pts: np.ndarray, origin: np.ndarray, scale: float):
    """Algebraic fit of ``a (x^2 + y^2) + b x + c y + d = 0`` (circle or line)."""
    z = (pts - origin) / scale
    A = np.column_stack([np.sum(z * z, axis=1), z[:, 0], z[:, 1], np.ones(len(z))])
    _, _, vt = np.linalg.svd(A, full_matrices=False)
    return vt[-1]


def measure_contact_angle(phi: np.ndarray, mesh: Mesh, wall: WallTag, eps: float,
                          fit_radius: float | None = None, exclude: float | None = None):
    """Angle (degrees) between the phi = 0 contour and ``wall``, measured through phi > 0.

    A circle (or straight line) is fitted to the contour points within
    ``fit_radius`` of each wall crossing, skipping points closer than
    ``exclude`` to the wall where the diffuse layer bends the contour.  The
    angle is averaged over all crossings on the wall.  Returns None when the
    contour does not meet the wall.
    """
    phi = np.asarray(phi, dtype=float)
    wall = WallTag(wall)
    crossings = _wall_crossings(phi, mesh, wall)
    if not crossings:
        return None
    fit_radius = 16.0 * eps if fit_radius is None else fit_radius
    exclude = 1.0 * eps if exclude is None else exclude
    axis, val = wall_line(mesh, wall)
    n_out = outward_normal(wall)
    pts = level_set_points(phi, mesh)
    angles = []
    for x0, w in crossings:
        dist_wall = np.abs(pts[:, axis] - val)
        near = (np.linalg.norm(pts - x0, axis=1) <= fit_radius) & (dist_wall >= exclude)
        P = pts[near]
        if len(P) < 4:
            continue
        a, b, c, d = _fit_conic(P, x0, fit_radius)
        # intersect the fitted curve with the wall, in scaled coordinates
        other = 1 - axis
        wv = (val - x0[axis]) / fit_radius
        # conic along the wall: a s^2 + (b or c) s + const = 0 with s the free coordinate
        lin = (b, c)[other]
        const = a * wv * wv + (b, c)[axis] * wv + d
        if abs(a) > 1e-12 * max(abs(lin), 1.0):
            disc_ = lin * lin - 4 * a * const
            if disc_ < 0:
                sroots = [-lin / (2 * a)]
            else:
                r = math.sqrt(disc_)
                sroots = [(-lin + r) / (2 * a), (-lin - r) / (2 * a)]
            s = min(sroots, key=abs)
        else:
            s = -const / lin
        zc = np.zeros(2)
        zc[axis] = wv
        zc[other] = s
        grad = np.array([2 * a * zc[0] + b, 2 * a * zc[1] + c])
        t = np.array([-grad[1], grad[0]])
        t /= np.linalg.norm(t)
        if t @ n_out > 0:
            t = -t
        angles.append(math.degrees(math.acos(float(np.clip(w @ t, -1.0, 1.0)))))
    if not angles:
        return None
    return float(np.mean(angles))


# --------------------------------------------------------------------------
# running

@dataclass
class RunResult:
    state: SimState
    reports: list[StepReport]
    steady_step: int | None
    snapshots: dict[float, np.ndarray] = field(default_factory=dict)

    @property
    def steady(self) -> bool:
        return self.steady_step is not None


def make_discretization(spec: ExperimentSpec, solver: SolverOptions = SolverOptions(),
                        check_S: bool = True) -> Discretization:
    forcing = ManufacturedForcing(spec.params, spec.walls) if spec.kind == "accuracy" else None
    return Discretization(spec.mesh(), spec.params, spec.walls, spec.stab, solver,
                          forcing=forcing, check_S=check_S)


def run(spec: ExperimentSpec, disc: Discretization | None = None, state: SimState | None = None,
        n_steps: int | None = None, snapshot_times=(), callback: Callable | None = None,
        detector: SteadyStateDetector | None = None) -> RunResult:
    """Advance an experiment to ``spec.T`` (or ``n_steps`` steps).

    With ``spec.stop_at_steady`` the run stops as soon as the steady-state
    detector fires.  ``snapshot_times`` lists times at which phi is stored;
    ``callback(step, state, report)`` is invoked after every step.
    """
    disc = disc or make_discretization(spec)
    state = state or initial_state(spec, disc)
    dt = disc.params.dt
    if n_steps is None:
        n_steps = int(round(spec.T / dt))
    detector = detector or SteadyStateDetector()
    snaps = {}
    pending = sorted(snapshot_times)
    for ts in list(pending):
        if ts <= state.t + 0.5 * dt:
            snaps[ts] = state.phi.copy()
            pending.remove(ts)
    reports = []
    energy = None
    steady_step = None
    for n in range(1, n_steps + 1):
        state, rep, energy = disc.advance(state, n, energy)
        reports.append(rep)
        if callback is not None:
            callback(n, state, rep)
        while pending and state.t >= pending[0] - 0.5 * dt:
            snaps[pending.pop(0)] = state.phi.copy()
        if detector.update(rep.phi_rate, n) and steady_step is None:
            steady_step = n
            if spec.stop_at_steady:
                break
    return RunResult(state, reports, steady_step, snaps)


@dataclass
class ConvergenceTable:
    """Errors at the final time for a sequence of time steps."""

    dt: list[float]
    err_u: list[float]
    err_v: list[float]
    err_p: list[float]
    err_phi: list[float]
    err_q: list[float]

    @staticmethod
    def _orders(dt, err):
        return [math.log(e0 / e1) / math.log(d0 / d1)
                for d0, d1, e0, e1 in zip(dt, dt[1:], err, err[1:])]

    def orders(self, name: str) -> list[float]:
        return self._orders(self.dt, getattr(self, f"err_{name}"))

    def ratios(self, name: str) -> list[float]:
        e = getattr(self, f"err_{name}")
        return [a / b for a, b in zip(e, e[1:])]

    def format(self) -> str:
        names = ("u", "v", "p", "phi", "q")
        head = f"{'dt':>10} " + " ".join(f"{'err_' + n:>12} {'order':>6}" for n in names)
        lines = [head]
        for i, d in enumerate(self.dt):
            cells = []
            for n in names:
                e = getattr(self, f"err_{n}")[i]
                o = self.orders(n)[i - 1] if i > 0 else float("nan")
                cells.append(f"{e:12.4e} {o:6.3f}" if i > 0 else f"{e:12.4e} {'-':>6}")
            lines.append(f"{d:10.3e} " + " ".join(cells))
        return "\n".join(lines)


def accuracy_errors(disc: Discretization, state: SimState) -> dict:
    """L2 errors of a manufactured run against the exact solution at ``state.t``."""
    geo, cgeo = disc.geo, disc.cgeo
    Nf = disc.fine.n_nodes
    t = state.t
    xq, yq = geo.xq[..., 0], geo.xq[..., 1]
    phi_e, u_e, v_e, _ = exact_solution(t, xq, yq)
    err = {
        "u": geo.integrate((geo.at_quad(state.u[:Nf]) - u_e) ** 2),
        "v": geo.integrate((geo.at_quad(state.u[Nf:]) - v_e) ** 2),
        "phi": geo.integrate((geo.at_quad(state.phi) - phi_e) ** 2),
    }
    p_e = exact_solution(t, cgeo.xq[..., 0], cgeo.xq[..., 1])[3]
    p_e = p_e - cgeo.integrate(p_e) / disc.area
    err["p"] = cgeo.integrate((cgeo.at_quad(state.p) - p_e) ** 2)
    eps = disc.params.eps
    qdef = (state.phi ** 2 - 1.0) / eps
    err["q"] = geo.integrate(geo.at_quad(state.q - qdef) ** 2)
    return {k: math.sqrt(v) for k, v in err.items()}


def run_accuracy(spec: ExperimentSpec, solver: SolverOptions = SolverOptions(),
                 progress: Callable | None = None) -> ConvergenceTable:
    """Temporal convergence study of the manufactured solution on one fixed mesh."""
    if spec.kind != "accuracy":
        raise ValueError("run_accuracy needs an accuracy experiment")
    base = make_discretization(spec, solver)
    rows = []
    for dt in spec.dt_list:
        disc = base.with_params(replace(spec.params, dt=dt))
        state = init_exact(disc)
        n = int(round(spec.T / dt))
        energy = None
        for k in range(1, n + 1):
            state, rep, energy = disc.advance(state, k, energy)
        e = accuracy_errors(disc, state)
        if progress is not None:
            progress(dt, e)
        rows.append(e)
    return ConvergenceTable(list(spec.dt_list), *[[r[k] for r in rows] for k in ("u", "v", "p", "phi", "q")])
