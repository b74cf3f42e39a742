"""P1 finite elements on triangle meshes: spaces, quadrature and assembly.

Every bilinear form on a given mesh shares one CSR sparsity pattern (the P1
node adjacency; boundary edges are triangle edges), so assembled operators
can be combined by adding their data arrays.  Vector-valued spaces store
coefficients component-major: ``[u_x(0..N-1), u_y(0..N-1)]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .linalg import SparseMatrix
from .mesh import ALL_WALLS, Mesh, WallTag, _as_wall_set, wall_node_array


# --------------------------------------------------------------------------
# quadrature

@dataclass(frozen=True)
class QuadratureRule:
    """Interior rule in barycentric coordinates plus a 1D edge rule on [0, 1].

    Weights are normalized to sum to one, i.e. they are fractions of the
    element measure.
    """

    bary: np.ndarray
    weights: np.ndarray
    edge_points: np.ndarray
    edge_weights: np.ndarray
    degree: int
    edge_degree: int


def _dunavant6():
    a1, w1 = 0.445948490915965, 0.223381589678011
    a2, w2 = 0.091576213509771, 0.109951743655322
    pts = []
    wts = []
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        pts += [(b, a, a), (a, b, a), (a, a, b)]
        wts += [w] * 3
    pts = np.array(pts)
    wts = np.array(wts)
    return pts, wts / wts.sum()


def _gauss_edge(n=3):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


QUAD = QuadratureRule(*_dunavant6(), *_gauss_edge(3), degree=4, edge_degree=5)


# --------------------------------------------------------------------------
# cached mesh geometry

class Geometry:
    """Per-mesh element geometry, quadrature tables and the shared CSR pattern."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        tri = mesh.triangles
        N = mesh.n_nodes
        p = mesh.nodes[tri]                                   # (T,3,2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if np.any(det <= 0):
            raise ValueError("mesh has non-positive triangle areas")
        self.area = 0.5 * det
        # gradients of barycentric coordinates: rows of inv([d1 d2])^T
        g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
        self.grads = np.stack([-g1 - g2, g1, g2], axis=1)   # (T,3,2)
        self.B = QUAD.bary                                    # (Q,3)
        self.w = QUAD.weights                                 # (Q,)
        self.xq = np.einsum("qa,tad->tqd", self.B, p)        # (T,Q,2)
        # exact P1 element mass: area/12 * [[2,1,1],[1,2,1],[1,1,2]]
        self.local_mass_ref = (np.ones((3, 3)) + np.eye(3)) / 12.0

        # shared pattern
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        keys = rows * N + cols
        ukeys, inv = np.unique(keys, return_inverse=True)
        self.n = N
        self.pat_rows = ukeys // N
        self.pat_cols = ukeys % N
        self.indptr = np.searchsorted(self.pat_rows, np.arange(N + 1)).astype(np.int64)
        self.indices = self.pat_cols.astype(np.int64)
        self.nnz = len(ukeys)
        self._tri_map = inv.ravel()
        self._keys = ukeys
        self.diag_pos = np.searchsorted(ukeys, np.arange(N) * N + np.arange(N))

        # boundary edges
        be = mesh.boundary_edges
        self.bedges = be
        self.btags = mesh.edge_tags
        pe = mesh.nodes[be]
        self.blen = np.linalg.norm(pe[:, 1] - pe[:, 0], axis=1)
        s = QUAD.edge_points
        self.bphi = np.column_stack([1.0 - s, s])             # (Qe,2)
        self.bw = QUAD.edge_weights
        self.bxq = np.einsum("qa,ead->eqd", self.bphi, pe)    # (E,Qe,2)
        erows = np.repeat(be, 2, axis=1).ravel()
        ecols = np.tile(be, (1, 2)).ravel()
        self._edge_map = np.searchsorted(ukeys, erows * N + ecols)
        if not np.array_equal(ukeys[self._edge_map], erows * N + ecols):
            raise ValueError("boundary edge missing from the triangulation")

        self.lumped = np.bincount(tri.ravel(), np.repeat(self.area / 3.0, 3), minlength=N)

    # pattern helpers ------------------------------------------------------
    def scatter(self, local: np.ndarray) -> np.ndarray:
        """Sum (T,3,3) element matrices into pattern-ordered data."""
        return np.bincount(self._tri_map, local.ravel(), minlength=self.nnz)

    def scatter_edges(self, local: np.ndarray, sel: np.ndarray | None = None) -> np.ndarray:
        """Sum (E,2,2) boundary-edge matrices into pattern-ordered data."""
        idx = self._edge_map.reshape(-1, 4)
        if sel is not None:
            idx = idx[sel]
        return np.bincount(idx.ravel(), local.ravel(), minlength=self.nnz)

    def matrix(self, data: np.ndarray) -> SparseMatrix:
        return SparseMatrix(self.indptr, self.indices, data, (self.n, self.n))

    def block_matrix(self, data_x: np.ndarray, data_y: np.ndarray) -> SparseMatrix:
        return SparseMatrix(self.block_indptr, self.block_indices,
                            np.concatenate([data_x, data_y]), (2 * self.n, 2 * self.n))

    @property
    def block_indptr(self):
        if not hasattr(self, "_bip"):
            self._bip = np.concatenate([self.indptr, self.indptr[1:] + self.nnz])
            self._bix = np.concatenate([self.indices, self.indices + self.n])
        return self._bip

    @property
    def block_indices(self):
        self.block_indptr
        return self._bix

    def wall_edge_mask(self, walls) -> np.ndarray:
        walls = _as_wall_set(walls)
        return np.isin(self.btags, [int(w) for w in walls])

    # field evaluation -----------------------------------------------------
    def at_quad(self, vals: np.ndarray) -> np.ndarray:
        """P1 nodal values -> (T,Q) values at interior quadrature points."""
        return vals[self.mesh.triangles] @ self.B.T

    def grad(self, vals: np.ndarray) -> np.ndarray:
        """P1 nodal values -> (T,2) elementwise gradient."""
        return np.einsum("ta,tad->td", vals[self.mesh.triangles], self.grads)

    def at_edge_quad(self, vals: np.ndarray, sel=None) -> np.ndarray:
        be = self.bedges if sel is None else self.bedges[sel]
        return vals[be] @ self.bphi.T

    def integrate(self, fq: np.ndarray) -> float:
        """Integrate (T,Q) quadrature-point values over the domain."""
        return float(np.sum(self.area * (fq @ self.w)))

    def integrate_edges(self, fq: np.ndarray, sel=None) -> float:
        blen = self.blen if sel is None else self.blen[sel]
        return float(np.sum(blen * (fq @ self.bw)))

    # element matrices -----------------------------------------------------
    def local_weighted_mass(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        T = len(self.area)
        if w.ndim == 0:
            return (w * self.area)[:, None, None] * self.local_mass_ref
        if w.shape == (T,):
            return (w * self.area)[:, None, None] * self.local_mass_ref
        if w.shape == (T, len(self.w)):
            return np.einsum("tq,q,qa,qb,t->tab", w, self.w, self.B, self.B, self.area)
        raise ValueError(f"weight shape {w.shape} not understood")

    def local_stiffness(self, coeff: float = 1.0) -> np.ndarray:
        return coeff * np.einsum("tad,tbd,t->tab", self.grads, self.grads, self.area)

    def local_edge_mass(self, w, sel=None) -> np.ndarray:
        blen = self.blen if sel is None else self.blen[sel]
        w = np.asarray(w, dtype=float)
        if w.ndim == 0:
            w = np.full((len(blen), len(self.bw)), float(w))
        elif w.ndim == 1:
            w = np.repeat(w[:, None], len(self.bw), axis=1)
        return np.einsum("eq,q,qa,qb,e->eab", w, self.bw, self.bphi, self.bphi, blen)


def geometry(mesh: Mesh) -> Geometry:
    geo = mesh._cache.get("geometry")
    if geo is None:
        geo = mesh._cache["geometry"] = Geometry(mesh)
    return geo


# --------------------------------------------------------------------------
# spaces and fields

@dataclass(frozen=True, eq=False)
class Space:
    """Scalar (ncomp=1) or vector (ncomp=2) P1 space with a Dirichlet mask.

    ``mask[i, k]`` flags component ``k`` of node ``i`` as constrained.
    """

    mesh: Mesh
    ncomp: int
    mask: np.ndarray

    def __post_init__(self):
        if self.mask.shape != (self.mesh.n_nodes, self.ncomp):
            raise ValueError("mask shape does not match the space")
        bnodes = wall_node_array(self.mesh, ALL_WALLS)
        interior = np.ones(self.mesh.n_nodes, dtype=bool)
        interior[bnodes] = False
        if np.any(self.mask[interior]):
            raise ValueError("Dirichlet mask may only flag boundary nodes")
        self.mask.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    @property
    def size(self) -> int:
        return self.mesh.n_nodes * self.ncomp

    @property
    def flat_mask(self) -> np.ndarray:
        return self.mask.T.ravel()

    @property
    def ndof(self) -> int:
        return self.size - int(self.mask.sum())

    @property
    def geo(self) -> Geometry:
        return geometry(self.mesh)


def scalar_space(mesh: Mesh) -> Space:
    return Space(mesh, 1, np.zeros((mesh.n_nodes, 1), dtype=bool))


def velocity_space(mesh: Mesh) -> Space:
    """x-velocity fixed on Left/Right, y-velocity fixed on the whole boundary.

    Normal velocity therefore vanishes strongly on every wall; tangential
    slip is free on Bottom/Top only.  Corner nodes get both constraints.
    """
    mask = np.zeros((mesh.n_nodes, 2), dtype=bool)
    mask[wall_node_array(mesh, {WallTag.LEFT, WallTag.RIGHT}), 0] = True
    mask[wall_node_array(mesh, ALL_WALLS), 1] = True
    return Space(mesh, 2, mask)


def tangential_component(wall: WallTag) -> int:
    return 0 if WallTag(wall) in (WallTag.BOTTOM, WallTag.TOP) else 1


@dataclass(eq=False)
class Field:
    space: Space
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.shape != (self.space.size,):
            raise ValueError(f"field length {self.values.shape} does not match space size {self.space.size}")

    def component(self, k: int) -> np.ndarray:
        n = self.space.n_nodes
        return self.values[k * n:(k + 1) * n]

    def copy(self) -> "Field":
        return Field(self.space, self.values.copy())


# --------------------------------------------------------------------------
# assembly

def _blockdiag(space: Space, data: np.ndarray) -> SparseMatrix:
    geo = space.geo
    if space.ncomp == 1:
        return geo.matrix(data)
    return geo.block_matrix(data, data)


def assemble_weighted_mass(s: Space, w=1.0) -> SparseMatrix:
    """Matrix of ``int w psi_i psi_j``.

    ``w`` may be a scalar, one value per triangle, or (T, Q) values at the
    interior quadrature points.  Vector spaces get one block per component.
    """
    geo = s.geo
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("mass weight must be finite")
    return _blockdiag(s, geo.scatter(geo.local_weighted_mass(w)))


def assemble_stiffness(s: Space, coeff: float = 1.0) -> SparseMatrix:
    if not np.isfinite(coeff):
        raise ValueError("stiffness coefficient must be finite")
    geo = s.geo
    return _blockdiag(s, geo.scatter(geo.local_stiffness(coeff)))


def convection_local(geo: Geometry, ux: np.ndarray, uy: np.ndarray) -> np.ndarray:
    """Element matrices of ``int (u . grad psi_j) psi_i + 1/2 div(u) psi_j psi_i``."""
    tri = geo.mesh.triangles
    uxq = geo.at_quad(ux)                                   # (T,Q)
    uyq = geo.at_quad(uy)
    # u . grad psi_j at each quad point: (T,Q,3)
    adv = uxq[:, :, None] * geo.grads[:, None, :, 0] + uyq[:, :, None] * geo.grads[:, None, :, 1]
    loc = np.einsum("tqb,q,qa,t->tab", adv, geo.w, geo.B, geo.area)
    div = np.einsum("ta,ta->t", ux[tri], geo.grads[:, :, 0]) + np.einsum("ta,ta->t", uy[tri], geo.grads[:, :, 1])
    loc += (0.5 * div * geo.area)[:, None, None] * geo.local_mass_ref
    return loc


def assemble_convection_skew(u: Field) -> SparseMatrix:
    """Skew-symmetrized advection ``B(u, v) = (u.grad)v + 1/2 (div u) v`` on the vector space."""
    if u.space.ncomp != 2:
        raise ValueError("advecting field must be vector valued")
    geo = u.space.geo
    data = geo.scatter(convection_local(geo, u.component(0), u.component(1)))
    return geo.block_matrix(data, data)


def assemble_boundary_weighted_mass(s: Space, walls, w=1.0, components=None) -> SparseMatrix:
    """Matrix of ``int_walls w psi_i psi_j`` using the edge rule.

    ``w`` may be a scalar, one value per selected edge, or (E_sel, Qe) values.
    For vector spaces the form acts on the listed ``components``, by default
    the tangential component of each wall.
    """
    walls = _as_wall_set(walls)
    if not walls:
        raise ValueError("at least one wall is required")
    geo = s.geo
    if s.ncomp == 1:
        sel = geo.wall_edge_mask(walls)
        return geo.matrix(geo.scatter_edges(geo.local_edge_mass(w, sel), sel))
    datas = []
    for k in range(2):
        ws = [wl for wl in walls if (components is None and tangential_component(wl) == k)
              or (components is not None and k in components)]
        if ws:
            sel = geo.wall_edge_mask(ws)
            wk = w if np.ndim(w) == 0 else np.asarray(w)[geo.wall_edge_mask(ws)[geo.wall_edge_mask(walls)]]
            datas.append(geo.scatter_edges(geo.local_edge_mass(wk, sel), sel))
        else:
            datas.append(np.zeros(geo.nnz))
    return geo.block_matrix(*datas)


def assemble_pressure_gradient(vspace: Space, pspace: Space) -> SparseMatrix:
    """Discrete gradient ``G[i, a] = int v_i . grad chi_a`` (constrained velocity rows zeroed).

    The pressure mesh must be the parent of the velocity mesh.  ``grad chi_a``
    is constant on each coarse triangle, so each fine triangle contributes
    ``area/3 * grad chi_a`` to each of its vertices exactly.
    """
    fine, coarse = vspace.mesh, pspace.mesh
    if fine.parent_map is None:
        raise ValueError("velocity mesh must be a refinement of the pressure mesh")
    cg = geometry(coarse)
    fg = geometry(fine)
    parent = fine.parent_map
    cgr = cg.grads[parent]                                  # (Tf,3,2) coarse grads on children
    ctri = coarse.triangles[parent]                         # (Tf,3)
    ftri = fine.triangles
    Nf, Nc = fine.n_nodes, coarse.n_nodes
    rows, cols, vals = [], [], []
    for k in range(2):
        contrib = (fg.area / 3.0)[:, None, None] * cgr[:, None, :, k]   # (Tf, 3 fine, 3 coarse)
        rows.append((k * Nf + np.repeat(ftri, 3, axis=1)).ravel())
        cols.append(np.tile(ctri, (1, 3)).ravel())
        vals.append(np.broadcast_to(contrib, (len(ftri), 3, 3)).ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keep = ~vspace.flat_mask[rows]
    return SparseMatrix.from_coo(rows[keep], cols[keep], vals[keep], (2 * Nf, Nc))


def _quad_values(s: Space, f, ncomp: int) -> np.ndarray:
    geo = s.geo
    T, Q = geo.xq.shape[:2]
    if callable(f):
        out = f(geo.xq[..., 0], geo.xq[..., 1])
        if ncomp == 2:
            out = np.stack([np.broadcast_to(out[0], (T, Q)), np.broadcast_to(out[1], (T, Q))], axis=-1)
        return np.broadcast_to(np.asarray(out, dtype=float), (T, Q) + ((2,) if ncomp == 2 else ()))
    f = np.asarray(f, dtype=float)
    shape = (T, Q) + ((2,) if ncomp == 2 else ())
    return np.broadcast_to(f, shape)


def assemble_load(s: Space, f) -> np.ndarray:
    """Vector of ``int f psi_i``.

    ``f`` is a scalar, (T, Q) quadrature values (with a trailing axis of 2 for
    vector spaces), or a callable ``f(x, y)`` evaluated at quadrature points.
    """
    geo = s.geo
    fq = _quad_values(s, f, s.ncomp)
    if not np.all(np.isfinite(fq)):
        raise ValueError("load values must be finite")
    tri = s.mesh.triangles
    N = s.n_nodes
    comps = [fq] if s.ncomp == 1 else [fq[..., 0], fq[..., 1]]
    out = []
    for c in comps:
        loc = np.einsum("tq,q,qa,t->ta", c, geo.w, geo.B, geo.area)
        out.append(np.bincount(tri.ravel(), loc.ravel(), minlength=N))
    return np.concatenate(out)


def assemble_boundary_load(s: Space, walls, f, component: int = 0) -> np.ndarray:
    """Vector of ``int_walls f psi_i`` for a scalar space (or one component of a vector space).

    ``f`` is a scalar, (E_sel, Qe) values, or a callable ``f(x, y)``.
    """
    geo = s.geo
    sel = geo.wall_edge_mask(walls)
    xq = geo.bxq[sel]
    if callable(f):
        fq = np.asarray(f(xq[..., 0], xq[..., 1]), dtype=float)
    else:
        fq = np.broadcast_to(np.asarray(f, dtype=float), xq.shape[:2])
    loc = np.einsum("eq,q,qa,e->ea", fq, geo.bw, geo.bphi, geo.blen[sel])
    vec = np.bincount(geo.bedges[sel].ravel(), loc.ravel(), minlength=s.n_nodes)
    out = np.zeros(s.size)
    out[component * s.n_nodes:(component + 1) * s.n_nodes] = vec
    return out


def interpolate(s: Space, fn: Callable) -> Field:
    """Nodal interpolant of ``fn(x, y)`` (returning a pair for vector spaces)."""
    x, y = s.mesh.nodes[:, 0], s.mesh.nodes[:, 1]
    v = fn(x, y)
    if s.ncomp == 2:
        vals = np.concatenate([np.broadcast_to(v[0], x.shape), np.broadcast_to(v[1], x.shape)])
    else:
        vals = np.broadcast_to(np.asarray(v, dtype=float), x.shape)
    return Field(s, np.array(vals, dtype=float))


def l2_norm(f, region="domain", mesh: Mesh | None = None) -> float:
    """L2 norm over the domain or over a set of walls.

    ``f`` is a :class:`Field` (exact for P1 fields on the domain) or raw
    quadrature values, in which case ``mesh`` is required.  ``region`` is
    ``"domain"`` or an iterable of walls.
    """
    if isinstance(f, Field):
        mesh = f.space.mesh
        geo = geometry(mesh)
        comps = [f.component(k) for k in range(f.space.ncomp)]
        if region == "domain":
            return float(np.sqrt(sum(geo.integrate(geo.at_quad(c) ** 2) for c in comps)))
        sel = geo.wall_edge_mask(region)
        return float(np.sqrt(sum(geo.integrate_edges(geo.at_edge_quad(c, sel) ** 2, sel) for c in comps)))
    if mesh is None:
        raise ValueError("mesh required for quadrature-point values")
    geo = geometry(mesh)
    fq = np.asarray(f, dtype=float)
    if region == "domain":
        sq = fq ** 2 if fq.ndim == 2 else np.sum(fq ** 2, axis=-1)
        return float(np.sqrt(geo.integrate(sq)))
    sel = geo.wall_edge_mask(region)
    sq = fq ** 2 if fq.ndim == 2 else np.sum(fq ** 2, axis=-1)
    return float(np.sqrt(geo.integrate_edges(sq, sel)))


def apply_dirichlet(A: SparseMatrix, b: np.ndarray, mask: np.ndarray, values) -> tuple[SparseMatrix, np.ndarray]:
    """Symmetric elimination of constrained unknowns.

    Constrained rows and columns are zeroed, their diagonal set to one and
    the right-hand side adjusted, so an SPD matrix stays SPD.
    """
    mask = np.asarray(mask, dtype=bool).ravel()
    values = np.broadcast_to(np.asarray(values, dtype=float), mask.shape)
    b = np.asarray(b, dtype=float)
    if not mask.any():
        return A, b.copy()
    g = np.where(mask, values, 0.0)
    rhs = b - A @ g
    rhs[mask] = g[mask]
    A2 = eliminate(A, mask)
    return A2, rhs


def eliminate(A: SparseMatrix, mask: np.ndarray) -> SparseMatrix:
    """Zero constrained rows and columns and put ones on their diagonal."""
    keep = sp.diags((~mask).astype(float))
    M = keep @ A.to_scipy() @ keep + sp.diags(mask.astype(float))
    return SparseMatrix.from_scipy(M)


class DirichletEliminator:
    """Fast symmetric elimination on a fixed sparsity pattern (homogeneous values)."""

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, mask: np.ndarray):
        rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
        kill = mask[rows] | mask[indices]
        self.keep = (~kill).astype(float)
        self.diag_one = (kill & (rows == indices)).astype(float)
        self.mask = mask

    def __call__(self, data: np.ndarray) -> np.ndarray:
        return data * self.keep + self.diag_one
