"""Linear, decoupled time stepping for the Navier-Stokes / Allen-Cahn contact-line system.

One step consists of

1. a phase-field solve for ``phi^{n+1}`` with the auxiliary variable
   ``q = (phi^2 - 1)/eps`` and a scalar multiplier ``xi`` that keeps the
   phase mass fixed,
2. a momentum solve for the intermediate velocity with skew-symmetric
   advection and Navier slip,
3. a pressure-correction projection.

Every step reports the terms of the discrete energy law so callers can
check stability and mass conservation as the run proceeds.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import fem
from .fem import DirichletEliminator, geometry
from .linalg import SparseMatrix, SolverError, bicgstab_solve, cg_solve
from .mesh import Mesh, WallTag, refine_uniform
from .model import PhysParams, StabSpec, WallSpec, resolve_S, surf_g, surf_g1

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-12
    maxit: int = 20000
    precond: str = "jacobi"
    inner_tol: float = 1e-14
    schur_precond: str = "amg"
    check_symmetry: bool = True


@dataclass
class SimState:
    """Discrete state at time ``t``.

    ``u`` holds velocity coefficients on the fine mesh (x block then y block),
    ``p`` pressure on the coarse mesh (mean zero), ``phi`` and ``q`` phase
    field and auxiliary variable on the fine mesh.
    """

    t: float
    u: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    q: np.ndarray

    def copy(self) -> "SimState":
        return SimState(self.t, self.u.copy(), self.p.copy(), self.phi.copy(), self.q.copy())


@dataclass
class Energy:
    E_kin: float
    E_grad: float
    E_q: float
    E_surf: float
    grad_p_term: float

    @property
    def E_total(self) -> float:
        return self.E_kin + self.E_grad + self.E_q + self.E_surf


@dataclass
class StepReport:
    step: int
    t: float
    xi: float
    E_kin: float
    E_grad: float
    E_q: float
    E_surf: float
    E_total: float
    grad_p_term: float
    D_visc: float
    D_phi: float
    D_slip: float
    energy_residual: float
    mass: float
    cg_iters_phase: int
    solver_iters_velocity: int
    cg_iters_projection: int
    phi_rate: float = 0.0
    energy_tol: float = 1e-8
    energy_law_applies: bool = True
    step1_symmetric: bool | None = None
    div_ratio: float = 0.0

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class PhaseResult:
    phi: np.ndarray
    q: np.ndarray
    xi: float
    iterations: int
    symmetric: bool | None = None
    D: np.ndarray | None = None


def verify_energy_law(report_n, report_next, dissipation, dt: float) -> float:
    """Left side minus right side of the discrete energy inequality.

    ``report_n``/``report_next`` expose ``E_total`` and ``grad_p_term``;
    ``dissipation`` is ``(D_visc, D_phi, D_slip)`` (rates, without ``dt``).
    Non-positive up to solver error whenever the wall speeds vanish and the
    stabilization satisfies ``S >= Lbar/2``.
    """
    lhs = report_next.E_total + report_next.grad_p_term + dt * float(sum(dissipation))
    rhs = report_n.E_total + report_n.grad_p_term
    return float(lhs - rhs)


class Discretization:
    """Mesh-dependent operators and the three sub-steps of the scheme.

    Parameters
    ----------
    coarse : Mesh
        Pressure mesh; the velocity/phase mesh is its uniform refinement.
    params : PhysParams
    walls : WallSpec
    stab : StabSpec
        Stabilization constant ``S`` for the contact-line boundary term.
    solver : SolverOptions
    forcing : object, optional
        Manufactured-solution hooks (see :mod:`mclsim.experiments`).
    check_S : bool
        Reject ``S < Lbar/2`` (disable only to probe the stability contract).
    """

    def __init__(self, coarse: Mesh, params: PhysParams, walls: WallSpec,
                 stab: StabSpec = StabSpec(), solver: SolverOptions = SolverOptions(),
                 forcing=None, check_S: bool = True):
        self.coarse = coarse
        self.fine = refine_uniform(coarse)
        self.params = params
        self.walls = walls
        self.solver = solver
        self.forcing = forcing
        self.S = resolve_S(stab, walls, check=check_S)

        self.sspace = fem.scalar_space(self.fine)
        self.vspace = fem.velocity_space(self.fine)
        self.pspace = fem.scalar_space(self.coarse)
        geo = self.geo = geometry(self.fine)
        self.cgeo = geometry(self.coarse)
        Nf = self.fine.n_nodes

        self.mass_data = geo.scatter(geo.local_weighted_mass(1.0))
        self.stiff_data = geo.scatter(geo.local_stiffness(1.0))
        self.M1 = geo.matrix(self.mass_data)
        self.K1 = geo.matrix(self.stiff_data)
        self.lumped = geo.lumped

        # contact-line walls
        self.sclc = []
        for tag, w in walls.items():
            if w.active_sclc:
                sel = geo.wall_edge_mask([tag])
                self.sclc.append((tag, w.theta_s, sel))
        self.bmass_data = np.zeros(geo.nnz)
        for _, _, sel in self.sclc:
            self.bmass_data += geo.scatter_edges(geo.local_edge_mass(1.0, sel), sel)
        self.Bm = geo.matrix(self.bmass_data)

        # Navier slip on the tangential component of every wall
        slip = [np.zeros(geo.nnz), np.zeros(geo.nnz)]
        self.slip_rhs = np.zeros(2 * Nf)
        self.slip_walls = []
        for tag, w in walls.items():
            if tag not in (WallTag.BOTTOM, WallTag.TOP):
                continue  # tangential velocity is held fixed on the side walls
            k = fem.tangential_component(tag)
            sel = geo.wall_edge_mask([tag])
            if w.slip_l > 0:
                slip[k] += geo.scatter_edges(geo.local_edge_mass(w.slip_l, sel), sel)
                self.slip_walls.append((tag, k, w.slip_l, w.u_wall, sel))
            if w.slip_l > 0 and w.u_wall != 0.0:
                self.slip_rhs += fem.assemble_boundary_load(self.vspace, [tag], w.slip_l * w.u_wall, component=k)
        self.slip_data = slip

        vmask = self.vspace.flat_mask
        self.vmask = vmask
        self.slip_rhs[vmask] = 0.0
        self.elim = DirichletEliminator(geo.block_indptr, geo.block_indices, vmask)
        self.Mu_full = geo.block_matrix(self.mass_data, self.mass_data)
        self.Mu = SparseMatrix(geo.block_indptr, geo.block_indices,
                               self.elim(self.Mu_full.data), self.Mu_full.shape)
        self.Ku_full = geo.block_matrix(self.stiff_data, self.stiff_data)
        self.Slip_full = geo.block_matrix(*slip)

        self.G = fem.assemble_pressure_gradient(self.vspace, self.pspace)
        self.GT = self.G.T
        self.GT_abs = SparseMatrix(self.GT.indptr, self.GT.indices, np.abs(self.GT.data), self.GT.shape)
        self._schur_M = None

    # ------------------------------------------------------------------
    @property
    def area(self) -> float:
        return self.coarse.area

    def with_params(self, params: PhysParams) -> "Discretization":
        """Share operators with a copy using different parameters (e.g. time step)."""
        other = object.__new__(Discretization)
        other.__dict__.update(self.__dict__)
        other.params = params
        other._schur_M = None
        return other

    def mass(self, phi: np.ndarray) -> float:
        return float(self.lumped @ phi)

    # ------------------------------------------------------------------
    def resolve_coupling_coefficient(self, phi_n: np.ndarray) -> np.ndarray:
        """Per-triangle ``D = 1 / (1 + (lam dt / M) |grad phi^n|^2)``."""
        P = self.params
        g = self.geo.grad(phi_n)
        return 1.0 / (1.0 + (P.lam * P.dt / P.M) * np.sum(g * g, axis=1))

    def phase_system(self, state: SimState):
        """Assemble the Step-1 matrix, right-hand side and constraint vectors."""
        P = self.params
        geo = self.geo
        dt, M, eps = P.dt, P.M, P.eps
        phi, q = state.phi, state.q
        Nf = self.fine.n_nodes
        D = self.resolve_coupling_coefficient(phi)
        gphi = geo.grad(phi)
        uxq = geo.at_quad(state.u[:Nf])
        uyq = geo.at_quad(state.u[Nf:])
        adv = uxq * gphi[:, 0, None] + uyq * gphi[:, 1, None]          # (T,Q)

        massD = geo.scatter(geo.local_weighted_mass(D))
        data = massD / dt + (M * eps) * self.stiff_data + (M * self.S) * self.bmass_data
        data[geo.diag_pos] += M * (2.0 / eps) * self.lumped * phi ** 2
        A = geo.matrix(data)

        b = geo.matrix(massD) @ phi / dt
        b -= fem.assemble_load(self.sspace, D[:, None] * adv)
        b += (M * self.S) * (self.Bm @ phi)
        b -= M * self.lumped * (phi * q - (2.0 / eps) * phi ** 3)
        for tag, theta, sel in self.sclc:
            gq = surf_g1(geo.at_edge_quad(phi, sel), theta)
            b -= M * fem.assemble_boundary_load(self.sspace, [tag], gq)
        if self.forcing is not None:
            t1 = state.t + dt
            b += fem.assemble_load(self.sspace, self.forcing.phase_source(t1, geo.xq[..., 0], geo.xq[..., 1]))
            for tag, _, sel in self.sclc:
                xq = geo.bxq[sel]
                h = self.forcing.sclc_data(t1, tag, xq[..., 0], xq[..., 1])
                b += M * fem.assemble_boundary_load(self.sspace, [tag], h)
        c = M * self.lumped
        return A, b, c, D

    def step_phase(self, state: SimState) -> PhaseResult:
        P = self.params
        A, b, c, D = self.phase_system(state)
        sym = A.is_symmetric() if self.solver.check_symmetry else None
        opts = dict(tol=self.solver.tol, maxit=self.solver.maxit, precond=self.solver.precond)
        phi0, r0 = cg_solve(A, b, x0=state.phi, **opts)
        phi1, r1 = cg_solve(A, c, **opts)
        w = self.lumped
        denom = w @ phi1
        if not np.isfinite(denom) or denom == 0.0:
            raise SolverError("degenerate mass constraint", r1)
        xi = (w @ phi0 - w @ state.phi) / denom
        phi_new = phi0 - xi * phi1
        q_new = state.q + (2.0 / P.eps) * state.phi * (phi_new - state.phi)
        return PhaseResult(phi_new, q_new, float(xi), r0.iterations + r1.iterations, sym, D)

    def compute_phidot_ustar(self, state: SimState, phi_next: np.ndarray, D=None):
        """Material derivative of phi and the explicit convective velocity at quadrature points.

        Returns ``phidot`` with shape (T, Q) and ``u_star`` with shape (T, Q, 2).
        """
        P = self.params
        geo = self.geo
        Nf = self.fine.n_nodes
        if D is None:
            D = self.resolve_coupling_coefficient(state.phi)
        gphi = geo.grad(state.phi)
        uq = np.stack([geo.at_quad(state.u[:Nf]), geo.at_quad(state.u[Nf:])], axis=-1)
        adv = np.einsum("tqd,td->tq", uq, gphi)
        dphi = geo.at_quad(phi_next - state.phi)
        phidot = D[:, None] * (dphi / P.dt + adv)
        ustar = uq - (P.lam * P.dt / P.M) * phidot[..., None] * gphi[:, None, :]
        return phidot, ustar

    def velocity_system(self, state: SimState, ustar: np.ndarray):
        P = self.params
        geo = self.geo
        Nf = self.fine.n_nodes
        conv = geo.scatter(fem.convection_local(geo, state.u[:Nf], state.u[Nf:]))
        base = self.mass_data / P.dt + P.nu * self.stiff_data + conv
        data = np.concatenate([base + self.slip_data[0], base + self.slip_data[1]])
        A = SparseMatrix(geo.block_indptr, geo.block_indices, self.elim(data), (2 * Nf, 2 * Nf))
        b = fem.assemble_load(self.vspace, ustar) / P.dt
        b -= self.G @ state.p
        b += self.slip_rhs
        if P.g0 != 0.0:
            b[Nf:] += P.g0 * (self.M1 @ state.phi)
        if self.forcing is not None:
            t1 = state.t + P.dt
            b += fem.assemble_load(self.vspace, self.forcing.momentum_source(t1, geo.xq[..., 0], geo.xq[..., 1]))
            for tag, k, _, _, sel in self.slip_walls:
                xq = geo.bxq[sel]
                h = self.forcing.slip_data(t1, tag, xq[..., 0], xq[..., 1])
                b += fem.assemble_boundary_load(self.vspace, [tag], h, component=k)
        b[self.vmask] = 0.0
        return A, b

    def step_velocity(self, state: SimState, ustar: np.ndarray):
        A, b = self.velocity_system(state, ustar)
        u, rep = bicgstab_solve(A, b, tol=self.solver.tol, maxit=self.solver.maxit,
                                precond=self.solver.precond, x0=state.u)
        return u, rep.iterations

    # ------------------------------------------------------------------
    def solve_mass(self, f: np.ndarray) -> np.ndarray:
        """Apply the inverse of the (constrained) consistent velocity mass matrix."""
        x, _ = cg_solve(self.Mu, f, tol=self.solver.inner_tol, maxit=self.solver.maxit, precond="jacobi")
        return x

    def _schur_preconditioner(self):
        if self._schur_M is not None:
            return self._schur_M
        kind = self.solver.schur_precond
        if kind in (None, "none"):
            self._schur_M = None
            return None
        Gs = self.G.to_scipy()
        ml = np.concatenate([self.lumped, self.lumped])
        inv = np.where(self.vmask, 0.0, 1.0 / ml)
        import scipy.sparse as sp
        KL = (Gs.T @ sp.diags(inv) @ Gs).tocsr()
        if kind == "jacobi":
            d = KL.diagonal().copy()
            d[d == 0] = 1.0
            inv_d = 1.0 / (self.params.dt * d)
            apply = lambda r: inv_d * r
        elif kind == "amg":
            import pyamg
            ml_solver = pyamg.smoothed_aggregation_solver(
                KL, B=np.ones((KL.shape[0], 1)), symmetry="symmetric", max_coarse=50)
            P_amg = ml_solver.aspreconditioner(cycle="V")
            dt = self.params.dt
            apply = lambda r: P_amg @ r / dt
        else:
            raise ValueError(f"unknown Schur preconditioner {kind!r}")

        # constants span the kernel; keeping them out of the search directions
        # stops CG from drifting once the residual reaches rounding level
        def precond(r):
            z = apply(r)
            return z - z.mean()

        self._schur_M = precond
        return precond

    def step_project(self, u_tilde: np.ndarray, p_n: np.ndarray):
        """Pressure-correction projection onto discretely divergence-free velocities."""
        dt = self.params.dt
        rhs = self.GT @ u_tilde
        if np.linalg.norm(rhs) == 0.0:
            return u_tilde.copy(), p_n.copy(), 0, 0.0

        def schur(psi):
            return dt * (self.GT @ self.solve_mass(self.G @ psi))

        # below this level the divergence is rounding noise of G^T u itself
        floor = 1e-13 * np.linalg.norm(self.GT_abs @ np.abs(u_tilde))
        psi, rep = cg_solve(schur, rhs, tol=self.solver.tol, maxit=self.solver.maxit,
                            precond=self._schur_preconditioner(), atol=floor)
        W = self.solve_mass(self.G @ psi)
        u_new = u_tilde - dt * W
        p_new = p_n + psi
        p_new -= (self.cgeo.lumped @ p_new) / self.area
        ratio = np.linalg.norm(self.GT @ u_new) / np.linalg.norm(rhs)
        return u_new, p_new, rep.iterations, float(ratio)

    # ------------------------------------------------------------------
    def grad_p_norm2(self, p: np.ndarray) -> float:
        """``||B_h^T p||^2 = (G p)^T M_u^{-1} (G p)``."""
        gp = self.G @ p
        if not np.any(gp):
            return 0.0
        return float(gp @ self.solve_mass(gp))

    def compute_energy(self, state: SimState) -> Energy:
        P = self.params
        geo = self.geo
        u, phi, q = state.u, state.phi, state.q
        E_kin = 0.5 * float(u @ (self.Mu_full @ u))
        E_grad = 0.5 * P.lam * P.eps * float(phi @ (self.K1 @ phi))
        E_q = 0.25 * P.lam * P.eps * float(self.lumped @ (q * q))
        E_surf = 0.0
        for _, theta, sel in self.sclc:
            E_surf += P.lam * geo.integrate_edges(surf_g(geo.at_edge_quad(phi, sel), theta), sel)
        gp = 0.5 * P.dt ** 2 * self.grad_p_norm2(state.p)
        return Energy(E_kin, E_grad, E_q, E_surf, gp)

    def dissipation(self, state: SimState, u_tilde: np.ndarray, phidot: np.ndarray):
        """Viscous, phase-relaxation and slip dissipation rates of one step."""
        P = self.params
        geo = self.geo
        Nf = self.fine.n_nodes
        D_visc = P.nu * float(u_tilde @ (self.Ku_full @ u_tilde))
        D_phi = P.lam / P.M * geo.integrate(phidot ** 2)
        D_slip = 0.0
        for tag, k, l, uw, sel in self.slip_walls:
            ut = geo.at_edge_quad(u_tilde[k * Nf:(k + 1) * Nf], sel) - uw
            D_slip += l * geo.integrate_edges(ut ** 2, sel)
        return D_visc, D_phi, D_slip

    def energy_law_applies(self) -> bool:
        """Whether the discrete energy inequality is guaranteed for this setup."""
        return (self.walls.all_walls_at_rest() and self.params.g0 == 0.0
                and self.forcing is None and self.S >= resolve_S(StabSpec(), self.walls) * (1 - 1e-12))

    # ------------------------------------------------------------------
    def advance(self, state: SimState, step: int = 0, energy_n: Energy | None = None):
        """One full step; returns ``(state_next, report, energy_next)``."""
        P = self.params
        if energy_n is None:
            energy_n = self.compute_energy(state)
        ph = self.step_phase(state)
        phidot, ustar = self.compute_phidot_ustar(state, ph.phi, ph.D)
        u_tilde, it_v = self.step_velocity(state, ustar)
        u_new, p_new, it_p, ratio = self.step_project(u_tilde, state.p)
        new = SimState(state.t + P.dt, u_new, p_new, ph.phi, ph.q)
        energy = self.compute_energy(new)
        diss = self.dissipation(state, u_tilde, phidot)
        resid = verify_energy_law(_EnergyView(energy_n), _EnergyView(energy), diss, P.dt)
        dphi = ph.phi - state.phi
        rate = float(np.sqrt(max(dphi @ (self.M1 @ dphi), 0.0))) / P.dt
        report = StepReport(
            step=step, t=new.t, xi=ph.xi,
            E_kin=energy.E_kin, E_grad=energy.E_grad, E_q=energy.E_q, E_surf=energy.E_surf,
            E_total=energy.E_total, grad_p_term=energy.grad_p_term,
            D_visc=diss[0], D_phi=diss[1], D_slip=diss[2], energy_residual=resid,
            mass=self.mass(ph.phi), cg_iters_phase=ph.iterations,
            solver_iters_velocity=it_v, cg_iters_projection=it_p, phi_rate=rate,
            energy_tol=energy_tolerance(energy_n.E_total), energy_law_applies=self.energy_law_applies(), step1_symmetric=ph.symmetric,
            div_ratio=ratio,
        )
        return new, report, energy


class _EnergyView:
    def __init__(self, e: Energy):
        self.E_total = e.E_total
        self.grad_p_term = e.grad_p_term


def energy_tolerance(E_n: float, rel: float = 1e-8) -> float:
    return rel * max(1.0, abs(E_n))


def advance(disc: Discretization, state: SimState, step: int = 0):
    """Functional form of :meth:`Discretization.advance` returning ``(state, report)``."""
    new, report, _ = disc.advance(state, step)
    return new, report
