"""Structured triangulations of a rectangle with wall-tagged boundary edges.

The velocity/phase mesh is the coarse (pressure) mesh refined once by edge
midpoints, which gives the Iso-P2/P1 pair.  Coarse node indices are a prefix
of the fine node indices.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class WallTag(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    BOTTOM = 2
    TOP = 3

    @classmethod
    def parse(cls, name: str) -> "WallTag":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown wall {name!r}") from None


ALL_WALLS = frozenset(WallTag)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh of ``[0, Lx] x [0, Ly]``.

    Attributes
    ----------
    nodes : (N, 2) float array
    triangles : (T, 3) int array, counter-clockwise
    boundary_edges : (E, 2) int array, oriented counter-clockwise around the domain
    edge_tags : (E,) int array of :class:`WallTag` values
    parent_map : (T,) int array or None
        Index of the coarse triangle each triangle was cut from.
    """

    Lx: float
    Ly: float
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: np.ndarray
    parent_map: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("nodes", "triangles", "boundary_edges", "edge_tags", "parent_map"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def area(self) -> float:
        return self.Lx * self.Ly

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted, as an (n_edges, 2) array."""
        if "edges" not in self._cache:
            self._cache["edges"] = _unique_edges(self.triangles)[0]
        return self._cache["edges"]

    def wall_edges(self, walls) -> np.ndarray:
        walls = _as_wall_set(walls)
        sel = np.isin(self.edge_tags, [int(w) for w in walls])
        return self.boundary_edges[sel]

    @property
    def h(self) -> float:
        """Largest edge length."""
        e = self.edges()
        return float(np.max(np.linalg.norm(self.nodes[e[:, 1]] - self.nodes[e[:, 0]], axis=1)))


def _as_wall_set(walls) -> frozenset:
    if isinstance(walls, WallTag):
        return frozenset([walls])
    return frozenset(WallTag(w) for w in walls)


def _unique_edges(triangles: np.ndarray):
    """Return sorted unique edges and, per triangle, the edge ids of (01, 12, 20)."""
    t = np.asarray(triangles)
    local = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
    local.sort(axis=1)
    edges, inverse = np.unique(local, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def build_rectangle(Lx: float, Ly: float, nx: int, ny: int) -> Mesh:
    """Split an ``nx`` by ``ny`` grid of cells along the (i,j)-(i+1,j+1) diagonal."""
    if not (Lx > 0 and Ly > 0):
        raise ValueError(f"domain extents must be positive, got Lx={Lx}, Ly={Ly}")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"cell counts must be integers >= 1, got nx={nx}, ny={ny}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(0.0, Lx, nx + 1)
    ys = np.linspace(0.0, Ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    n00 = idx[:-1, :-1].ravel()
    n10 = idx[:-1, 1:].ravel()
    n01 = idx[1:, :-1].ravel()
    n11 = idx[1:, 1:].ravel()
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)

    bottom = np.column_stack([idx[0, :-1], idx[0, 1:]])
    right = np.column_stack([idx[:-1, -1], idx[1:, -1]])
    top = np.column_stack([idx[-1, 1:], idx[-1, :-1]])[::-1]
    left = np.column_stack([idx[1:, 0], idx[:-1, 0]])[::-1]
    bedges = np.vstack([bottom, right, top, left])
    tags = np.concatenate([
        np.full(nx, WallTag.BOTTOM), np.full(ny, WallTag.RIGHT),
        np.full(nx, WallTag.TOP), np.full(ny, WallTag.LEFT),
    ]).astype(np.int64)
    return Mesh(float(Lx), float(Ly), nodes, triangles.astype(np.int64), bedges.astype(np.int64), tags)


def refine_uniform(m: Mesh) -> Mesh:
    """Split every triangle into four through its edge midpoints.

    New midpoint nodes are appended after the coarse nodes, so coarse node
    ``i`` keeps index ``i``.  ``parent_map`` of the result maps each fine
    triangle to the coarse triangle containing it.
    """
    edges, tri_edges = _unique_edges(m.triangles)
    n0 = m.n_nodes
    mid = 0.5 * (m.nodes[edges[:, 0]] + m.nodes[edges[:, 1]])
    # midpoints of axis-aligned edges should land exactly on the walls
    nodes = np.vstack([m.nodes, mid])

    a, b, c = m.triangles.T
    mab = n0 + tri_edges[:, 0]
    mbc = n0 + tri_edges[:, 1]
    mca = n0 + tri_edges[:, 2]
    children = np.stack([
        np.column_stack([a, mab, mca]),
        np.column_stack([mab, b, mbc]),
        np.column_stack([mca, mbc, c]),
        np.column_stack([mab, mbc, mca]),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(m.n_triangles), 4)

    be = np.sort(m.boundary_edges, axis=1)
    # locate each boundary edge in the sorted unique edge list
    keys = edges[:, 0] * (n0 + 1) + edges[:, 1]
    bkeys = be[:, 0] * (n0 + 1) + be[:, 1]
    bid = np.searchsorted(keys, bkeys)
    if not np.array_equal(keys[bid], bkeys):
        raise ValueError("boundary edges are not edges of the triangulation")
    bm = n0 + bid
    p, q = m.boundary_edges.T
    bedges = np.stack([np.column_stack([p, bm]), np.column_stack([bm, q])], axis=1).reshape(-1, 2)
    tags = np.repeat(m.edge_tags, 2)
    return Mesh(m.Lx, m.Ly, nodes, children.astype(np.int64), bedges.astype(np.int64),
                tags.astype(np.int64), parent.astype(np.int64))


def wall_nodes(m: Mesh, walls) -> set[int]:
    """Indices of the nodes lying on any of ``walls`` (corners count for both walls)."""
    return set(wall_node_array(m, walls).tolist())


def wall_node_array(m: Mesh, walls) -> np.ndarray:
    e = m.wall_edges(walls)
    return np.unique(e.ravel())


def wall_line(m: Mesh, wall: WallTag) -> tuple[int, float]:
    """Return (coordinate axis, coordinate value) of the line carrying ``wall``."""
    wall = WallTag(wall)
    return {
        WallTag.LEFT: (0, 0.0),
        WallTag.RIGHT: (0, m.Lx),
        WallTag.BOTTOM: (1, 0.0),
        WallTag.TOP: (1, m.Ly),
    }[wall]


def outward_normal(wall: WallTag) -> np.ndarray:
    return {
        WallTag.LEFT: np.array([-1.0, 0.0]),
        WallTag.RIGHT: np.array([1.0, 0.0]),
        WallTag.BOTTOM: np.array([0.0, -1.0]),
        WallTag.TOP: np.array([0.0, 1.0]),
    }[WallTag(wall)]
