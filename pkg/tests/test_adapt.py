import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixedafem.adapt import (
    AfemConfig,
    bulk_satisfied,
    dorfler_mark,
    marked_near,
    predicted_dofs,
    rate_table,
    read_history,
    run_afem,
)
from mixedafem.eigsolve import ClusterSpec
from mixedafem.fespace import FeDegree, build_dofmap
from mixedafem.mesh import lshape, uniform_refine, unit_square
from mixedafem.verify import square_cluster


def brute_force_dorfler(vals, theta):
    """Smallest bulk subsets by exhaustive search."""
    n = len(vals)
    total = sum(vals)
    for size in range(n + 1):
        hits = [set(c) for c in itertools.combinations(range(n), size) if sum(vals[i] for i in c) >= theta * total * (1 - 1e-12)]
        if hits:
            return size, hits
    raise AssertionError("unreachable")


# ---------------------------------------------------------------- marking
def test_dorfler_simple():
    assert dorfler_mark([4.0, 3.0, 2.0, 1.0], 0.5).tolist() == [0, 1]
    assert dorfler_mark([1.0, 3.0, 2.0, 4.0], 0.5).tolist() == [1, 3]
    assert dorfler_mark([4.0, 3.0, 2.0, 1.0], 1.0).tolist() == [0, 1, 2, 3]
    assert dorfler_mark([0.0, 0.0], 0.3).size == 0


def test_dorfler_theta_one_skips_zero_indicators():
    assert dorfler_mark([2.0, 0.0, 1.0], 1.0).tolist() == [0, 2]


def test_dorfler_ties_take_lowest_ids():
    assert dorfler_mark([1.0, 1.0, 1.0, 1.0], 0.5).tolist() == [0, 1]
    assert dorfler_mark([0.5, 2.0, 2.0, 0.5], 0.4).tolist() == [1]


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5, float("nan")])
def test_dorfler_rejects_theta(bad):
    with pytest.raises(ValueError):
        dorfler_mark([1.0, 2.0], bad)


@pytest.mark.parametrize("vals", [[1.0, -1.0], [1.0, float("inf")], [[1.0, 2.0]]])
def test_dorfler_rejects_values(vals):
    with pytest.raises(ValueError):
        dorfler_mark(vals, 0.5)


@given(
    st.lists(st.floats(0.0, 10.0, allow_nan=False), min_size=1, max_size=10),
    st.floats(0.01, 1.0),
)
def test_dorfler_is_minimal(vals, theta):
    marked = dorfler_mark(vals, theta)
    if sum(vals) == 0:
        assert marked.size == 0
        return
    size, hits = brute_force_dorfler(vals, theta)
    assert bulk_satisfied(vals, marked, theta)
    assert marked.size == size


# ---------------------------------------------------------------- config
@pytest.mark.parametrize(
    "kw",
    [dict(theta=0.0), dict(theta=1.2), dict(max_levels=-1), dict(max_dofs=0), dict(eta_tol=-1.0), dict(diagnostics=True)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AfemConfig(**kw)


def test_predicted_dofs_matches_dof_map():
    m = uniform_refine(lshape(), 1)
    for deg in (FeDegree("RT", 0), FeDegree("RT", 2), FeDegree("BDM", 0)):
        d = build_dofmap(m, deg)
        assert predicted_dofs(m, deg) == d.n_sigma + d.n_u


# ---------------------------------------------------------------- loop
def test_zero_levels_gives_single_solve():
    h = run_afem(AfemConfig(max_levels=0), uniform_refine(unit_square(), 1))
    assert len(h) == 1 and h.status == "max_levels"
    assert h.records[0].card_M == 0


def test_theta_one_on_square_is_optimal():
    # one bisection per level: meshes alternate between two shape classes,
    # so fit over the even levels (similar meshes)
    h = run_afem(AfemConfig(theta=1.0, max_dofs=20_000), unit_square())
    assert len(h) >= 9
    even = h.records[::2]
    slope = rate_table(even, ["eta2"], trailing=3)["eta2"][0]
    assert slope == pytest.approx(-1.0, abs=0.1)


@pytest.fixture(scope="module")
def lshape_run():
    return run_afem(AfemConfig(theta=0.5, max_dofs=15_000), lshape())


def test_lshape_refines_towards_reentrant_corner(lshape_run):
    for data in lshape_run.levels:
        m = data.mesh
        corner = np.flatnonzero(np.all(m.vertices == 0.0, axis=1))[0]
        touching = np.any(m.triangles == corner, axis=1)
        # the singular elements are always in the bulk
        assert touching[data.marked].any()
    m = lshape_run.levels[-1].mesh
    corner = np.flatnonzero(np.all(m.vertices == 0.0, axis=1))[0]
    touching = np.any(m.triangles == corner, axis=1)
    assert m.diameters[touching].max() < m.diameters.max() / 16
    # marks are denser near the corner than the area share of a disk around it
    area_frac = 0.75 * math.pi / 16 / 3
    late = lshape_run.levels[len(lshape_run) // 2 :]
    assert all(marked_near(d.mesh, d.marked, (0.0, 0.0), 0.25) > 2 * area_frac for d in late)


def test_lshape_level_invariants(lshape_run):
    card = lshape_run.column("card_T")
    assert np.all(np.diff(card) > 0)
    assert lshape_run.status == "max_dofs"
    for prev, nxt in zip(lshape_run.levels, lshape_run.levels[1:]):
        survivors = set(nxt.mesh.keys)
        assert not any(prev.mesh.keys[t] in survivors for t in prev.marked)
        assert bulk_satisfied(prev.field.per_element, prev.marked, 0.5)
        assert prev.energy_residual < 1e-8 and prev.ortho_residual < 1e-10
    # the estimator decays at the optimal rate in dofs
    assert rate_table(lshape_run.records, ["eta2"], trailing=5)["eta2"][0] < -0.85


def test_history_csv_round_trip(tmp_path, lshape_run):
    path = tmp_path / "history.csv"
    lshape_run.to_csv(path)
    back = read_history(path)
    assert len(back) == len(lshape_run)
    for a, b in zip(back, lshape_run.records):
        assert a.lambdas == b.lambdas and a.eta2 == b.eta2 and a.card_M == b.card_M
        assert a.d2 is None


def test_read_history_rejects_garbage(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("level,foo\n0,1\n")
    with pytest.raises(ValueError):
        read_history(path)


def test_runs_are_deterministic():
    cfg = AfemConfig(theta=0.4, cluster=ClusterSpec.parse("2:3"), max_levels=4)
    a = run_afem(cfg, unit_square())
    b = run_afem(cfg, unit_square())
    for x, y in zip(a.levels, b.levels):
        assert np.array_equal(x.mesh.vertices, y.mesh.vertices)
        assert np.array_equal(x.field.eta2, y.field.eta2)
        assert np.array_equal(x.marked, y.marked)


def test_stop_on_eta_tol():
    h = run_afem(AfemConfig(eta_tol=5.0), unit_square())
    assert h.status == "eta_tol"
    assert h.records[-1].eta2 <= 5.0 < h.records[-2].eta2


def test_stop_on_max_dofs_without_solving_next_mesh():
    h = run_afem(AfemConfig(max_dofs=1000), unit_square())
    assert h.status == "max_dofs"
    assert all(r.n_dofs <= 1000 for r in h.records)
    assert h.records[-1].card_M > 0
    assert run_afem(AfemConfig(max_dofs=3), unit_square()).status == "max_dofs"


def test_stop_on_lost_separation():
    # lambda_2 = lambda_3 on the square, so J = {2} violates the guard
    h = run_afem(AfemConfig(cluster=ClusterSpec.parse("2:2")), uniform_refine(unit_square(), 2))
    assert h.status == "separation_lost"
    assert len(h) == 1


def test_solver_failure_is_recorded():
    h = run_afem(AfemConfig(cluster=ClusterSpec.parse("100:100"), max_levels=0), unit_square())
    assert h.status == "solver_failure"
    assert len(h) == 0 and "level 0" in h.message


def test_diagnostics_columns():
    cfg = AfemConfig(max_levels=2, diagnostics=True, exact=tuple(square_cluster([1])))
    h = run_afem(cfg, uniform_refine(unit_square(), 1))
    assert h.has_diagnostics
    xi = h.column("xi2")
    assert np.allclose(xi, h.column("mu2") + h.column("d2"))
