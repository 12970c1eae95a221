import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mixedafem.assembly import assemble
from mixedafem.eigsolve import ClusterSpec, solve_cluster
from mixedafem.fespace import FeDegree
from mixedafem.mesh import lshape, uniform_refine, unit_square

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

PI2 = math.pi**2

# filled by the acceptance tests, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance_report():
    def record(number: int, passed: bool, text: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {text}"
        ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def square_levels():
    """Uniform refinements 0..4 of the two-triangle unit square."""
    out = [unit_square()]
    for _ in range(4):
        out.append(uniform_refine(out[-1], 1))
    return out


@pytest.fixture(scope="session")
def lshape_mesh():
    return lshape()


@pytest.fixture(scope="session")
def square_rt0_l3(square_levels):
    mesh = square_levels[3]
    sys = assemble(mesh, FeDegree())
    return sys, solve_cluster(sys, ClusterSpec(0, 3))


def random_refinement(mesh, rng, steps, frac=0.3):
    """Refine ``steps`` times with random mark sets."""
    from mixedafem.mesh import refine

    for _ in range(steps):
        n = max(1, int(frac * mesh.n_triangles * rng.random()))
        mesh = refine(mesh, rng.choice(mesh.n_triangles, size=n, replace=False))
    return mesh
