"""Extrapolated reference eigenvalues for domains without closed forms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .assembly import assemble
from .eigsolve import ClusterSpec, solve_cluster
from .fespace import FeDegree
from .mesh import DOMAINS, uniform_refine

# First Dirichlet eigenvalue of the L-shape (-1,1)^2 \ [0,1]x[-1,0]:
# RT0 on uniform levels 5, 6, 7 (15488 .. 246272 dofs) extrapolated with a
# fitted exponent.  The bar is the change against levels 4, 5, 6.
LSHAPE_LAMBDA1 = 9.6397158408
LSHAPE_LAMBDA1_ERR = 3.9e-5


@dataclass(frozen=True)
class Extrapolation:
    value: float
    exponent: float  # observed order in h
    error_bar: float
    samples: tuple


def extrapolate(values: Sequence[float], ratio: float = 2.0, exponent: float | None = None) -> Extrapolation:
    """Richardson extrapolation of the last three values of a sequence.

    The mesh size shrinks by ``ratio`` between samples.  With
    ``exponent=None`` the order is estimated from the three values (Aitken),
    which is needed when singularities reduce the rate below the smooth one.
    The error bar is the change relative to the same estimate one level
    coarser (or the size of the correction if only three values exist).
    """
    v = [float(x) for x in values]
    if len(v) < 3:
        raise ValueError("extrapolation needs three values")

    def one(a, b, c):
        if exponent is None:
            d1, d2 = b - a, c - b
            if d1 == 0 or d2 == 0 or d1 * d2 < 0:
                raise ValueError("sequence is not monotone; cannot estimate the order")
            p = math.log(d1 / d2) / math.log(ratio)
        else:
            p = exponent
        return c + (c - b) / (ratio**p - 1), p

    val, p = one(*v[-3:])
    if len(v) >= 4:
        prev, _ = one(*v[-4:-1])
        bar = abs(val - prev)
    else:
        bar = abs(val - v[-1])
    return Extrapolation(val, p, bar, tuple(v))


def uniform_eigenvalues(domain: str, levels: Sequence[int], degree: FeDegree | None = None, index: int = 1) -> list[float]:
    """``lambda_{h,index}`` on uniform refinements of a named domain."""
    degree = degree or FeDegree()
    spec = ClusterSpec(n=index - 1, size=1, guard=0.0)
    out = []
    for level in levels:
        mesh = uniform_refine(DOMAINS[domain](), level)
        out.append(float(solve_cluster(assemble(mesh, degree), spec).values[0]))
    return out


def lshape_reference(levels: Sequence[int] = (4, 5, 6, 7)) -> Extrapolation:
    """Recompute the L-shape reference from uniform runs."""
    return extrapolate(uniform_eigenvalues("lshape", levels))
