import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_refinement
from mixedafem.mesh import (
    MeshError,
    ancestor_map,
    equilateral,
    from_arrays,
    load_initial_mesh,
    lshape,
    min_angle,
    overlay,
    point_in_triangle,
    read_mesh,
    refine,
    uniform_refine,
    unit_square,
    write_mesh,
    write_vtk,
)


def edge_multiset(mesh):
    """Independent edge count: python dict over sorted vertex pairs."""
    count = {}
    for a, b, c in mesh.triangles.tolist():
        for e in ((a, b), (b, c), (c, a)):
            k = tuple(sorted(e))
            count[k] = count.get(k, 0) + 1
    return count


# ---------------------------------------------------------------- construction
def test_unit_square_counts():
    m = unit_square()
    assert (m.n_vertices, m.n_triangles) == (4, 2)
    assert m.is_conforming() and m.is_compatible()


def test_lshape_counts():
    m = lshape()
    assert (m.n_vertices, m.n_triangles) == (8, 6)
    assert m.areas.sum() == pytest.approx(3.0)
    assert m.is_compatible()


def test_inverted_triangle_rejected():
    with pytest.raises(MeshError, match="negative"):
        from_arrays([[0, 0], [1, 0], [0, 1]], [[0, 2, 1]])


def test_degenerate_triangle_rejected():
    with pytest.raises(MeshError):
        from_arrays([[0, 0], [1, 0], [2, 0]], [[0, 1, 2]])


def test_hanging_node_rejected():
    # big triangle next to two small ones sharing a midpoint on its edge
    v = [[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5]]
    t = [[0, 1, 2], [1, 3, 4], [4, 3, 2]]
    with pytest.raises(MeshError, match="hanging"):
        from_arrays(v, t)


def test_load_initial_mesh_variants(tmp_path):
    assert load_initial_mesh("square").n_triangles == 2
    path = tmp_path / "l.mesh"
    write_mesh(lshape(), path)
    assert load_initial_mesh(path).n_triangles == 6
    assert load_initial_mesh(([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])).n_triangles == 1


def test_longest_edge_is_refinement_edge():
    m = lshape()
    p = m.vertices[m.triangles]
    ref_len = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    assert np.allclose(ref_len, m.diameters)


# ---------------------------------------------------------------- refinement
def test_single_triangle_bisection():
    m = equilateral()
    r = refine(m, [0])
    assert r.n_triangles == 2
    assert np.all(r.generation == 1)
    assert r.areas.sum() == pytest.approx(m.areas.sum())


def test_empty_marking_returns_input():
    m = unit_square()
    assert refine(m, []) is m


def test_square_closure_bisects_both():
    # the shared diagonal is the refinement edge of both triangles
    r = refine(unit_square(), [0])
    assert r.n_triangles == 4
    assert np.allclose(r.areas, 0.25)
    assert any(np.allclose(v, [0.5, 0.5]) for v in r.vertices)
    assert r.is_conforming()


def test_marks_out_of_range():
    with pytest.raises(IndexError):
        refine(unit_square(), [5])


def test_uniform_refine_halves_h():
    m = uniform_refine(unit_square(), 3)
    assert m.n_triangles == 2 * 4**3
    assert m.diameters.max() == pytest.approx(math.sqrt(2) / 8)


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_refinement_invariants(seed, steps):
    rng = np.random.default_rng(seed)
    base = lshape() if seed % 2 else unit_square()
    m = base
    for _ in range(steps):
        n = max(1, int(0.3 * m.n_triangles * rng.random()))
        marked = rng.choice(m.n_triangles, size=n, replace=False)
        r = refine(m, marked)
        # conformity: interior edges twice, boundary edges once
        counts = edge_multiset(r)
        assert set(counts.values()) <= {1, 2}
        assert r.is_conforming()
        assert np.all(r.dets > 0)
        # nestedness and generations
        for t in range(r.n_triangles):
            p = r.parent[t]
            assert point_in_triangle(m, p, r.vertices[r.triangles[t]]).all()
            depth = len(r.path[t]) - len(m.path[p])
            assert r.generation[t] == m.generation[p] + depth
            assert depth >= 0
        # marked triangles do not survive
        survivors = set(r.keys)
        assert not any(m.keys[t] in survivors for t in marked)
        assert r.areas.sum() == pytest.approx(base.areas.sum())
        m = r


def test_topology_matches_independent_enumeration(square_levels):
    m = refine(square_levels[2], [0, 5, 7])
    counts = edge_multiset(m)
    topo = m.topology
    assert topo.n_edges == len(counts)
    assert int(topo.boundary.sum()) == sum(1 for c in counts.values() if c == 1)
    assert np.all(topo.length > 0)
    assert np.allclose(np.linalg.norm(topo.tangent, axis=1), 1.0)
    # both incident triangles see the same global tangent, opposite local orientation
    inner = ~topo.boundary
    s0 = topo.edge_sign[topo.triangles_of_edge[inner, 0], topo.local_index[inner, 0]]
    s1 = topo.edge_sign[topo.triangles_of_edge[inner, 1], topo.local_index[inner, 1]]
    assert np.all(s0 == -s1)


# ---------------------------------------------------------------- angles
def test_min_angle_examples():
    assert min_angle(unit_square()) == pytest.approx(math.pi / 4)
    assert min_angle(equilateral()) == pytest.approx(math.pi / 3)


def test_min_angle_exhaustive_depth10():
    # ten bisection generations of every triangle; NVB keeps the similarity class
    m = uniform_refine(unit_square(), 5)
    assert m.generation.max() == 10
    assert min_angle(m) == pytest.approx(math.pi / 4, abs=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_min_angle_never_below_depth10_minimum(seed):
    m = random_refinement(unit_square(), np.random.default_rng(seed), 8)
    assert min_angle(m) >= math.pi / 4 - 1e-12


def test_lshape_shape_regular():
    depth10 = min_angle(uniform_refine(lshape(), 5))
    m = random_refinement(lshape(), np.random.default_rng(3), 10)
    assert min_angle(m) >= depth10 - 1e-12


# ---------------------------------------------------------------- overlay
def test_overlay_idempotent(square_levels):
    m = refine(square_levels[1], [0, 3])
    o = overlay(m, m)
    assert o.n_triangles == m.n_triangles
    assert set(o.keys) == set(m.keys)


def test_overlay_with_refinement():
    t0 = unit_square()
    r = refine(t0, np.arange(2))
    o = overlay(t0, r)
    assert set(o.keys) == set(r.keys)


def test_overlay_two_bisections_of_square():
    # square -> 4 triangles; then bisect different ones
    s = refine(unit_square(), [0])
    t1, t2 = refine(s, [0]), refine(s, [2])
    o = overlay(t1, t2)
    assert o.n_triangles <= t1.n_triangles + t2.n_triangles - 2
    assert o.is_conforming()


@given(st.integers(0, 2**31 - 1))
def test_overlay_bound_random(seed):
    rng = np.random.default_rng(seed)
    t0 = lshape() if seed % 2 else unit_square()
    t1 = random_refinement(t0, rng, int(rng.integers(1, 5)))
    t2 = random_refinement(t0, rng, int(rng.integers(1, 5)))
    o = overlay(t1, t2)
    assert o.n_triangles <= t1.n_triangles + t2.n_triangles - t0.n_triangles
    assert o.is_conforming()
    # refines both inputs
    for t in (t1, t2):
        anc = ancestor_map(o, t)
        assert np.allclose(np.bincount(anc, weights=o.areas, minlength=t.n_triangles), t.areas)


def test_overlay_requires_common_base():
    with pytest.raises(MeshError):
        overlay(unit_square(), lshape())


def test_ancestor_map_geometry(square_levels):
    coarse = square_levels[1]
    fine = random_refinement(coarse, np.random.default_rng(0), 3)
    anc = ancestor_map(fine, coarse)
    for t in range(fine.n_triangles):
        assert point_in_triangle(coarse, anc[t], fine.vertices[fine.triangles[t]]).all()


# ---------------------------------------------------------------- I/O
def test_mesh_file_round_trip(tmp_path):
    m = random_refinement(lshape(), np.random.default_rng(1), 3)
    path = tmp_path / "m.mesh"
    write_mesh(m, path)
    header = path.read_text().splitlines()[0]
    assert header == f"{m.n_vertices} {m.n_triangles}"
    r = read_mesh(path)
    assert np.array_equal(r.vertices, m.vertices)
    assert np.array_equal(r.triangles, m.triangles)
    assert np.array_equal(r.generation, m.generation)


def test_read_mesh_rotates_refinement_edge(tmp_path):
    path = tmp_path / "t.mesh"
    path.write_text("3 1\n0 0\n1 0\n0 1\n0 1 2 1 0\n")
    m = read_mesh(path)
    assert m.triangles.tolist() == [[1, 2, 0]]


def test_read_mesh_malformed(tmp_path):
    path = tmp_path / "bad.mesh"
    path.write_text("3 2\n0 0\n1 0\n0 1\n0 1 2 0 0\n")
    with pytest.raises(MeshError):
        read_mesh(path)


def test_vtk_export(tmp_path):
    m = uniform_refine(unit_square(), 1)
    path = tmp_path / "m.vtk"
    write_vtk(m, path, {"eta2": np.arange(m.n_triangles)})
    text = path.read_text()
    assert f"CELLS {m.n_triangles} {4 * m.n_triangles}" in text
    assert text.count("\n5\n") + text.endswith("5\n") >= 1
    assert "SCALARS eta2 double 1" in text
