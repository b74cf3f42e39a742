import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mclsim.mesh import (WallTag, build_rectangle, outward_normal, refine_uniform, wall_line,
                         wall_node_array, wall_nodes)


@pytest.mark.parametrize("args, counts", [
    ((1, 1, 1, 1), (4, 2, 4)),
    ((2, 2, 2, 2), (9, 8, 8)),
])
def test_build_counts(args, counts):
    m = build_rectangle(*args)
    assert (m.n_nodes, m.n_triangles, len(m.boundary_edges)) == counts


@pytest.mark.parametrize("bad", [(0, 1, 1, 1), (1, -1, 1, 1), (1, 1, 0, 1), (1, 1, 1, 1.5)])
def test_build_rejects_invalid(bad):
    with pytest.raises(ValueError):
        build_rectangle(*bad)


def test_refine_counts_and_prefix():
    m = build_rectangle(1, 1, 1, 1)
    f = refine_uniform(m)
    assert (f.n_nodes, f.n_triangles) == (9, 8)
    ff = refine_uniform(f)
    assert (ff.n_nodes, ff.n_triangles) == (25, 32)
    np.testing.assert_array_equal(f.nodes[:m.n_nodes], m.nodes)
    assert np.bincount(f.parent_map).tolist() == [4] * m.n_triangles


def test_wall_nodes():
    m = build_rectangle(1, 1, 1, 1)
    bottom = wall_nodes(m, {WallTag.BOTTOM})
    assert len(bottom) == 2 and all(m.nodes[i, 1] == 0 for i in bottom)
    assert wall_nodes(m, set(WallTag)) == {0, 1, 2, 3}
    assert len(wall_nodes(build_rectangle(2, 2, 2, 2), {WallTag.LEFT, WallTag.RIGHT})) == 6


def test_wall_parse_and_order():
    assert WallTag.parse(" top ") is WallTag.TOP
    assert [w.name for w in WallTag] == ["LEFT", "RIGHT", "BOTTOM", "TOP"]
    with pytest.raises(ValueError):
        WallTag.parse("front")


@settings(max_examples=30, deadline=None)
@given(Lx=st.floats(0.1, 10), Ly=st.floats(0.1, 10), nx=st.integers(1, 12), ny=st.integers(1, 12))
def test_mesh_invariants(Lx, Ly, nx, ny):
    m = build_rectangle(Lx, Ly, nx, ny)
    for mesh in (m, refine_uniform(m)):
        a = mesh.signed_areas()
        assert np.all(a > 0)
        assert np.isclose(a.sum(), Lx * Ly, rtol=1e-12)
        # Euler characteristic of a disc
        assert mesh.n_nodes - len(mesh.edges()) + mesh.n_triangles == 1
        # boundary edges lie on their wall and cover the perimeter
        for tag in WallTag:
            axis, val = wall_line(mesh, tag)
            e = mesh.wall_edges([tag])
            assert np.allclose(mesh.nodes[e.ravel(), axis], val, atol=1e-12 * max(Lx, Ly))
        seg = mesh.nodes[mesh.boundary_edges]
        assert np.isclose(np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1).sum(), 2 * (Lx + Ly), rtol=1e-12)
        # every boundary edge is used by exactly one triangle
        t = mesh.triangles
        local = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        keys, counts = np.unique(local, axis=0, return_counts=True)
        bset = {tuple(e) for e in np.sort(mesh.boundary_edges, axis=1)}
        assert bset == {tuple(k) for k, c in zip(keys, counts) if c == 1}


def test_boundary_edges_counter_clockwise():
    m = build_rectangle(2, 1, 3, 2)
    seg = m.nodes[m.boundary_edges]
    mid = seg.mean(axis=1)
    d = seg[:, 1] - seg[:, 0]
    for tag in WallTag:
        sel = m.edge_tags == tag
        n = outward_normal(tag)
        # outward normal is the tangent rotated clockwise
        rot = np.column_stack([d[sel, 1], -d[sel, 0]])
        assert np.all(rot @ n > 0)
    assert len(wall_node_array(m, [WallTag.TOP])) == 4
    assert mid.shape == (len(m.boundary_edges), 2)


def test_mesh_arrays_read_only():
    m = build_rectangle(1, 1, 2, 2)
    with pytest.raises(ValueError):
        m.nodes[0, 0] = 5.0
