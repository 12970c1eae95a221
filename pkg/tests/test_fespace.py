import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixedafem.assembly import assemble
from mixedafem.fespace import (
    FeDegree,
    build_dofmap,
    eval_basis,
    gauss_line,
    physical_points,
    reference_coordinates,
    scalar_basis,
    sigma_basis,
    triangle_rule,
)
from mixedafem.mesh import refine, uniform_refine, unit_square

DEGREES = [FeDegree("RT", 0), FeDegree("RT", 1), FeDegree("RT", 2), FeDegree("BDM", 0)]


# ---------------------------------------------------------------- quadrature
@given(st.integers(0, 8), st.integers(0, 8))
def test_triangle_rule_exact_on_monomials(a, b):
    # closed form over the reference triangle: a! b! / (a + b + 2)!
    rule = triangle_rule(a + b)
    x, y = rule.points[:, 0], rule.points[:, 1]
    exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
    assert rule.weights @ (x**a * y**b) == pytest.approx(exact, rel=1e-13)


@given(st.integers(1, 8))
def test_gauss_line_exact(n):
    s, w = gauss_line(n)
    for p in range(2 * n):
        assert w @ s**p == pytest.approx(1.0 / (p + 1), rel=1e-13)


# ---------------------------------------------------------------- degrees
def test_degree_parsing():
    assert FeDegree.parse("rt0") == FeDegree("RT", 0)
    assert FeDegree.parse("RT1") == FeDegree("RT", 1)
    assert FeDegree.parse("bdm1") == FeDegree("BDM", 0)
    assert FeDegree.parse("bdm1").name == "bdm1"
    for bad in ("rt", "p1", "bdm2", "rt9"):
        with pytest.raises(ValueError):
            FeDegree.parse(bad)


@pytest.mark.parametrize("deg", DEGREES, ids=lambda d: d.name)
def test_local_dimensions(deg):
    # dim RT_k = (k+1)(k+3), dim BDM_1 = 6, dim P_k = (k+1)(k+2)/2
    k = deg.k
    expected = (k + 1) * (k + 3) if deg.family == "RT" else 6
    assert deg.n_local_sigma == expected
    assert deg.n_local_u == (k + 1) * (k + 2) // 2


# ---------------------------------------------------------------- dof maps
def test_square_rt0_dimensions():
    d = build_dofmap(unit_square(), FeDegree("RT", 0))
    assert (d.n_sigma, d.n_u) == (5, 2)


def test_square_rt1_dimensions():
    d = build_dofmap(unit_square(), FeDegree("RT", 1))
    assert (d.n_sigma, d.n_u) == (2 * 5 + 2 * 2, 6)


def test_rt0_sigma_count_equals_edges():
    m = refine(unit_square(), [0])
    m = refine(m, [1, 2])
    edges = {tuple(sorted(e)) for a, b, c in m.triangles.tolist() for e in ((a, b), (b, c), (c, a))}
    assert build_dofmap(m, FeDegree()).n_sigma == len(edges)


def test_shared_edge_dofs_have_opposite_signs():
    m = uniform_refine(unit_square(), 1)
    d = build_dofmap(m, FeDegree("RT", 1))
    topo = m.topology
    inner = np.flatnonzero(~topo.boundary)
    for e in inner:
        (t0, t1), (i0, i1) = topo.triangles_of_edge[e], topo.local_index[e]
        ne = d.degree.edge_dofs
        ids0 = d.sigma_ids[t0, i0 * ne : (i0 + 1) * ne]
        ids1 = d.sigma_ids[t1, i1 * ne : (i1 + 1) * ne]
        assert sorted(ids0) == sorted(ids1)
        assert d.sigma_signs[t0, i0 * ne] == -d.sigma_signs[t1, i1 * ne]
    # M_h is element local
    assert len(np.unique(d.u_ids)) == d.n_u


# ---------------------------------------------------------------- basis
TRI = np.array([[0.2, 0.1], [1.3, 0.4], [0.5, 1.2]])


def _outward_normal(i):
    a, b = TRI[(i + 1) % 3], TRI[(i + 2) % 3]
    d = b - a
    return np.array([d[1], -d[0]]) / np.linalg.norm(d), np.linalg.norm(d)


def test_rt0_normal_flux_at_midpoint():
    for i in range(3):
        bary = np.zeros(3)
        bary[(i + 1) % 3] = bary[(i + 2) % 3] = 0.5
        vals, _, _ = eval_basis(FeDegree(), TRI, bary)
        n, length = _outward_normal(i)
        flux = vals @ n
        expected = np.zeros(3)
        expected[i] = 1.0 / length
        assert np.allclose(flux, expected, atol=1e-14)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_rt0_curl_zero_and_div_constant(s, t):
    bary = np.array([1.0 - s * (1 - t) - s * t, s * (1 - t), s * t])
    bary = np.abs(bary) / np.abs(bary).sum()
    _, div, curl = eval_basis(FeDegree(), TRI, bary)
    assert np.allclose(curl, 0.0, atol=1e-13)
    # divergence theorem: unit flux through the boundary over the area
    area = 0.5 * abs(np.linalg.det(np.stack([TRI[1] - TRI[0], TRI[2] - TRI[0]], 1)))
    assert np.allclose(div, 1.0 / area, rtol=1e-12)


@pytest.mark.parametrize("deg", DEGREES, ids=lambda d: d.name)
def test_edge_dof_duality(deg):
    # edge functionals: Gauss-weighted normal fluxes on the physical edges
    s, w = gauss_line(deg.edge_dofs)
    ne = deg.edge_dofs
    for i in range(3):
        a, b = TRI[(i + 1) % 3], TRI[(i + 2) % 3]
        n, length = _outward_normal(i)
        for q in range(ne):
            x = a + s[q] * (b - a)
            lam = np.linalg.solve(np.stack([TRI[1] - TRI[0], TRI[2] - TRI[0]], 1), x - TRI[0])
            bary = np.array([1 - lam.sum(), *lam])
            vals, _, _ = eval_basis(deg, TRI, bary)
            functional = w[q] * length * (vals @ n)
            expected = np.zeros(deg.n_local_sigma)
            expected[i * ne + q] = 1.0
            assert np.allclose(functional, expected, atol=1e-12)


@pytest.mark.parametrize("deg", DEGREES, ids=lambda d: d.name)
def test_piola_divergence_matches_finite_differences(deg):
    bary = np.array([0.3, 0.45, 0.25])
    J = np.stack([TRI[1] - TRI[0], TRI[2] - TRI[0]], 1)
    x0 = TRI[0] + J @ bary[1:]
    h = 1e-6

    def at(x):
        lam = np.linalg.solve(J, x - TRI[0])
        return eval_basis(deg, TRI, np.array([1 - lam.sum(), *lam]))[0]

    dx = (at(x0 + [h, 0]) - at(x0 - [h, 0])) / (2 * h)
    dy = (at(x0 + [0, h]) - at(x0 - [0, h])) / (2 * h)
    _, div, curl = eval_basis(deg, TRI, bary)
    assert np.allclose(div, dx[:, 0] + dy[:, 1], atol=1e-6 * np.abs(div).max())
    # scalar curl convention: d sigma_1 / dy - d sigma_2 / dx
    assert np.allclose(curl, dy[:, 0] - dx[:, 1], atol=1e-6 * max(1.0, np.abs(curl).max()))


@pytest.mark.parametrize("deg", DEGREES, ids=lambda d: d.name)
def test_normal_trace_continuity(deg):
    m = refine(uniform_refine(unit_square(), 1), [0, 3])
    d = build_dofmap(m, deg)
    coef = np.random.default_rng(0).standard_normal(d.n_sigma)
    topo = m.topology
    s, _ = gauss_line(deg.sigma_degree + 1)
    from mixedafem.fespace import edge_points

    traces = {}
    for i in range(3):
        vals = sigma_basis(m, d, edge_points(i, s)).values
        field = np.einsum("tqbj,tb->tqj", vals, d.local_sigma(coef))
        for t in range(m.n_triangles):
            e = topo.edge_of_triangle[t, i]
            pts = field[t] if topo.edge_sign[t, i] > 0 else field[t, ::-1]
            tan = topo.tangent[e]
            normal = np.array([tan[1], -tan[0]])
            traces.setdefault(e, []).append(pts @ normal)
    scale = max(np.abs(np.concatenate(v)).max() for v in traces.values())
    for e, tr in traces.items():
        if len(tr) == 2:
            assert np.allclose(tr[0], tr[1], atol=1e-12 * scale)


@pytest.mark.parametrize("deg", DEGREES, ids=lambda d: d.name)
def test_divergence_lies_in_scalar_space(deg):
    m = uniform_refine(unit_square(), 1)
    sys = assemble(m, deg)
    d = sys.dofs
    coef = np.random.default_rng(1).standard_normal(d.n_sigma)
    # L2 projection of div sigma onto M_h, then compare pointwise on a fine rule
    proj = sys.B @ coef / sys.M.diagonal()
    rule = triangle_rule(2 * deg.k + 6)
    div = np.einsum("tqb,tb->tq", sigma_basis(m, d, rule.points).div, d.local_sigma(coef))
    phi, _ = scalar_basis(m, d, rule.points)
    back = np.einsum("tqb,tb->tq", phi, d.local_u(proj))
    assert np.allclose(div, back, atol=1e-10 * np.abs(div).max())
    # B has full row rank (div is onto M_h)
    assert np.linalg.matrix_rank(sys.B.toarray()) == d.n_u


def test_scalar_basis_orthogonal_with_unit_first_function():
    m = uniform_refine(unit_square(), 1)
    for k in range(3):
        d = build_dofmap(m, FeDegree("RT", k))
        rule = triangle_rule(2 * k + 2)
        phi, _ = scalar_basis(m, d, rule.points)
        assert np.allclose(phi[..., 0], 1.0)
        G = np.einsum("q,tqa,tqb->tab", rule.weights, phi, phi)
        off = G - np.einsum("tab,ab->tab", G, np.eye(d.degree.n_local_u))
        assert np.abs(off).max() < 1e-13


def test_reference_coordinates_invert_physical_points():
    m = uniform_refine(unit_square(), 2)
    X = np.random.default_rng(2).random((5, 2)) * 0.5
    P = physical_points(m, X)
    R = reference_coordinates(m, np.arange(m.n_triangles), P)
    assert np.allclose(R, X[None], atol=1e-13)
