"""
Error quantities against exact eigenpairs.

``Lambda_h u`` is the L2 projection of ``T_h^lambda u`` onto the span of the
discrete cluster.  The distance between two scalar functions also compares
their (discrete) gradients::

    d(v, w)^2 = ||v - w||^2 + |G(v) - G(w)|^2

where ``G`` is the exact gradient for analytic functions and ``G_h`` (the
Sigma_h field solving ``A g + B^T w = 0``) for functions in ``M_h``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .assembly import MixedSystem, l2_project
from .eigsolve import EigenCluster, solve_source
from .estimator import IndicatorField, indicator_terms
from .fespace import (
    DofMap,
    physical_points,
    reference_coordinates,
    scalar_basis,
    sigma_basis,
    triangle_rule,
)
from .mesh import Mesh, ancestor_map


# ----------------------------------------------------------------------
# exact references
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ExactEigenpair:
    """Continuous eigenpair with unit L2 norm; ``grad`` returns (..., 2)."""

    lam: float
    u: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    provenance: str = "analytic"
    label: str = ""


def square_eigenpair(m: int, n: int) -> ExactEigenpair:
    """``2 sin(m pi x) sin(n pi y)`` on the unit square."""
    pi = math.pi

    def u(x, y):
        return 2.0 * np.sin(m * pi * x) * np.sin(n * pi * y)

    def grad(x, y):
        return np.stack(
            [
                2.0 * m * pi * np.cos(m * pi * x) * np.sin(n * pi * y),
                2.0 * n * pi * np.sin(m * pi * x) * np.cos(n * pi * y),
            ],
            axis=-1,
        )

    return ExactEigenpair(pi**2 * (m * m + n * n), u, grad, "analytic", f"({m},{n})")


def square_spectrum(count: int) -> list[tuple[int, int]]:
    """Mode numbers of the lowest ``count`` Dirichlet eigenvalues of (0,1)^2."""
    modes = sorted(
        ((m * m + n * n, m, n) for m in range(1, count + 2) for n in range(1, count + 2))
    )
    return [(m, n) for _, m, n in modes[:count]]


def square_cluster(indices: Sequence[int]) -> list[ExactEigenpair]:
    modes = square_spectrum(max(indices))
    return [square_eigenpair(*modes[j - 1]) for j in indices]


@dataclass(frozen=True)
class AnalyticPair:
    """Scalar function with its exact gradient."""

    u: Callable
    grad: Callable


@dataclass(frozen=True)
class DiscretePair:
    """Function in ``M_h`` together with its discrete gradient in ``Sigma_h``."""

    u: np.ndarray
    sigma: np.ndarray


def combine(pairs: Sequence[ExactEigenpair], alpha: Sequence[float]) -> AnalyticPair:
    alpha = [float(a) for a in alpha]
    return AnalyticPair(
        lambda x, y: sum(a * p.u(x, y) for a, p in zip(alpha, pairs)),
        lambda x, y: sum(a * p.grad(x, y) for a, p in zip(alpha, pairs)),
    )


def _evaluate(pair, mesh: Mesh, dofs: DofMap, ref_pts, X):
    if pair is None:
        return 0.0, 0.0
    if isinstance(pair, DiscretePair):
        phi, _ = scalar_basis(mesh, dofs, ref_pts)
        sv = sigma_basis(mesh, dofs, ref_pts)
        v = np.einsum("tqb,tb->tq", phi, dofs.local_u(pair.u))
        g = np.einsum("tqbi,tb->tqi", sv.values, dofs.local_sigma(pair.sigma))
        return v, g
    return pair.u(X[..., 0], X[..., 1]), pair.grad(X[..., 0], X[..., 1])


def _order(dofs: DofMap, order: int | None) -> int:
    return 2 * dofs.degree.k + 4 if order is None else order


def distance(mesh: Mesh, dofs: DofMap, v, w, weight: float = 1.0, order: int | None = None) -> float:
    """``sqrt(weight ||v - w||^2 + |G v - G w|^2)``.

    ``v`` and ``w`` are :class:`DiscretePair`, analytic pairs (anything with
    ``u`` and ``grad`` callables) or ``None`` for zero.  ``weight`` is 1 for
    the plain distance; other values give the lambda-balanced variant.
    """
    rule = triangle_rule(_order(dofs, order))
    X = physical_points(mesh, rule.points)
    v0, g0 = _evaluate(v, mesh, dofs, rule.points, X)
    v1, g1 = _evaluate(w, mesh, dofs, rule.points, X)
    dv = np.broadcast_to(np.asarray(v0) - np.asarray(v1), X.shape[:2])
    dg = np.broadcast_to(np.asarray(g0) - np.asarray(g1), X.shape)
    wdet = rule.weights[None, :] * mesh.dets[:, None]
    val = weight * np.einsum("tq,tq,tq->", wdet, dv, dv) + np.einsum("tq,tqi,tqi->", wdet, dg, dg)
    return math.sqrt(max(float(val), 0.0))


# ----------------------------------------------------------------------
# Lambda_h
# ----------------------------------------------------------------------
def project_cluster(sys: MixedSystem, cluster: EigenCluster, w: np.ndarray) -> np.ndarray:
    """Coefficients of the L2 projection of ``w`` onto the span of ``cluster.u``."""
    return cluster.u.T @ (sys.M @ w)


def lambda_op(sys: MixedSystem, cluster: EigenCluster, exact, lam: float | None = None, order: int | None = None):
    """``(Lambda_h u, G_h(Lambda_h u))`` as coefficient vectors.

    ``exact`` is an :class:`ExactEigenpair` or a coefficient vector in
    ``M_h`` (then ``lam`` must be given).
    """
    if isinstance(exact, ExactEigenpair):
        g = l2_project(sys.mesh, sys.dofs, exact.u, order=_order(sys.dofs, order))
        lam = exact.lam
    else:
        g = np.asarray(exact, dtype=float)
        if lam is None:
            raise ValueError("lam is required for discrete input")
    _, t = solve_source(sys, g, lam)
    c = project_cluster(sys, cluster, t)
    return cluster.u @ c, cluster.sigma @ c


@dataclass
class LambdaImage:
    exact: ExactEigenpair
    u: np.ndarray
    sigma: np.ndarray

    @property
    def pair(self) -> DiscretePair:
        return DiscretePair(self.u, self.sigma)


def mu_estimator(mesh: Mesh, dofs: DofMap, lam_u: np.ndarray, grad_lam_u: np.ndarray) -> IndicatorField:
    """``mu_h(u; T)^2``: estimator kernels applied to ``(G_h(Lambda_h u), Lambda_h u)``."""
    return indicator_terms(mesh, dofs, grad_lam_u, lam_u)


# ----------------------------------------------------------------------
# cluster gap
# ----------------------------------------------------------------------
@dataclass
class ClusterGapReport:
    delta: float
    d_lambda: np.ndarray  # d(u_j, Lambda_h u_j)
    best: np.ndarray  # inf over W_h of d(u_j, .)
    eig_error: float  # sup_i inf_j |lambda_i - lambda_h,j|

    @property
    def ratio(self) -> float:
        return self.eig_error / self.delta**2 if self.delta > 0 else float("nan")


def eigenvalue_error(exact_values: Sequence[float], discrete_values: Sequence[float]) -> float:
    """``sup_i inf_j |lambda_i - lambda_h,j|``."""
    ex = np.asarray(exact_values, dtype=float)[:, None]
    di = np.asarray(discrete_values, dtype=float)[None, :]
    return float(np.abs(ex - di).min(axis=1).max())


def gram_matrices(sys: MixedSystem, W: Sequence[ExactEigenpair], cluster: EigenCluster, order: int | None = None):
    """d-inner products ``(G_ww, L_ww, G_wh, G_hh)`` of exact and discrete clusters.

    ``L_ww`` is the plain L2 Gram matrix of the exact functions.
    """
    mesh, dofs = sys.mesh, sys.dofs
    rule = triangle_rule(_order(dofs, order))
    X = physical_points(mesh, rule.points)
    x, y = X[..., 0], X[..., 1]
    U = np.stack([p.u(x, y) for p in W])  # (N, T, q)
    GU = np.stack([p.grad(x, y) for p in W])  # (N, T, q, 2)
    phi, _ = scalar_basis(mesh, dofs, rule.points)
    sv = sigma_basis(mesh, dofs, rule.points)
    uh = np.einsum("tqb,tbn->ntq", phi, dofs.local_u(cluster.u))
    sh = np.einsum("tqbi,tbn->ntqi", sv.values, dofs.local_sigma(cluster.sigma))
    wdet = rule.weights[None, :] * mesh.dets[:, None]
    Lww = np.einsum("tq,itq,ktq->ik", wdet, U, U)
    Gww = Lww + np.einsum("tq,itqa,ktqa->ik", wdet, GU, GU)
    Gwh = np.einsum("tq,itq,jtq->ij", wdet, U, uh) + np.einsum("tq,itqa,jtqa->ij", wdet, GU, sh)
    Ghh = cluster.u.T @ (sys.M @ cluster.u) + cluster.sigma.T @ (sys.A @ cluster.sigma)
    return Gww, Lww, Gwh, 0.5 * (Ghh + Ghh.T)


def cluster_gap(
    sys: MixedSystem,
    W: Sequence[ExactEigenpair],
    cluster: EigenCluster,
    images: Sequence[LambdaImage] | None = None,
    order: int | None = None,
) -> ClusterGapReport:
    """``delta(W, W_h)`` via the N x N reduction of the sup-inf problem.

    For ``u = sum_i alpha_i u_i`` the squared distance to the discrete
    cluster is ``alpha^T S alpha`` with ``S = G_ww - G_wh G_hh^{-1} G_wh^T``;
    ``delta^2`` is the largest eigenvalue of ``S`` relative to ``L_ww``.
    """
    if len(W) != cluster.size:
        raise ValueError("exact and discrete clusters differ in size")
    Gww, Lww, Gwh, Ghh = gram_matrices(sys, W, cluster, order)
    if np.linalg.cond(Ghh) > 1e12:
        raise np.linalg.LinAlgError("discrete cluster Gram matrix is rank deficient")
    S = Gww - Gwh @ np.linalg.solve(Ghh, Gwh.T)
    S = 0.5 * (S + S.T)
    delta2 = float(sla.eigh(S, Lww, eigvals_only=True)[-1])
    best = np.sqrt(np.clip(np.diag(S) / np.diag(Lww), 0.0, None))
    if images is None:
        images = lambda_images(sys, W, cluster, order)
    d_lambda = np.array(
        [distance(sys.mesh, sys.dofs, im.exact, im.pair, order=order) for im in images]
    )
    return ClusterGapReport(
        delta=math.sqrt(max(delta2, 0.0)),
        d_lambda=d_lambda,
        best=best,
        eig_error=eigenvalue_error([p.lam for p in W], cluster.values),
    )


def lambda_images(sys, W, cluster, order=None) -> list[LambdaImage]:
    out = []
    for p in W:
        lu, g = lambda_op(sys, cluster, p, order=order)
        out.append(LambdaImage(p, lu, g))
    return out


# ----------------------------------------------------------------------
# per-level diagnostics for AFEM runs
# ----------------------------------------------------------------------
@dataclass
class LevelDiagnostics:
    d2: float  # sum_j d(u_j, Lambda u_j)^2
    delta: float
    mu2: float  # sum_j mu(u_j, T)^2 over all elements
    xi2: float
    eig_error: float
    epsilon: float  # max_j ||u_j - Lambda u_j||
    mu_elem: np.ndarray = field(repr=False)  # (T,) summed over j
    images: list = field(repr=False, default_factory=list)
    h_max: float = 0.0


def level_diagnostics(sys: MixedSystem, cluster: EigenCluster, W: Sequence[ExactEigenpair], beta: float = 1.0) -> LevelDiagnostics:
    images = lambda_images(sys, W, cluster)
    report = cluster_gap(sys, W, cluster, images=images)
    mu = np.zeros(sys.mesh.n_triangles)
    for im in images:
        mu += mu_estimator(sys.mesh, sys.dofs, im.u, im.sigma).eta2[0]
    eps = max(
        distance(sys.mesh, sys.dofs, AnalyticPair(im.exact.u, lambda x, y: 0.0 * x[..., None]),
                 DiscretePair(im.u, np.zeros_like(im.sigma)))
        for im in images
    )
    d2 = float(np.sum(report.d_lambda**2))
    mu2 = float(mu.sum())
    return LevelDiagnostics(
        d2=d2,
        delta=report.delta,
        mu2=mu2,
        xi2=mu2 + beta * d2,
        eig_error=report.eig_error,
        epsilon=eps,
        mu_elem=mu,
        images=images,
        h_max=float(sys.mesh.diameters.max()),
    )


def estimator_comparison(eta_elem: np.ndarray, mu_elem: np.ndarray, exact_values, discrete_values, local: bool = False) -> dict:
    """Two-sided comparison of the summed estimators.

    Checks ``N^-1 sum mu^2 <= (B/A)^2 sum eta^2`` and
    ``sum eta^2 <= (B/A)^2 (2N + 4N^2) sum mu^2`` with ``[A, B]`` spanning
    the exact and discrete cluster values, globally or per element.
    """
    vals = np.concatenate([np.asarray(exact_values, float), np.asarray(discrete_values, float)])
    A, B = vals.min(), vals.max()
    N = len(exact_values)
    q = (B / A) ** 2
    eta = np.asarray(eta_elem, float)
    mu = np.asarray(mu_elem, float)
    if not local:
        eta, mu = np.array([eta.sum()]), np.array([mu.sum()])
    lower = mu / N <= q * eta * (1 + 1e-12) + 1e-300
    upper = eta <= q * (2 * N + 4 * N * N) * mu * (1 + 1e-12) + 1e-300
    return {
        "ratio_B_A_sq": q,
        "lower_ok": bool(lower.all()),
        "upper_ok": bool(upper.all()),
        "lower_max": float(np.max(mu / N / np.maximum(q * eta, 1e-300))),
        "upper_max": float(np.max(eta / np.maximum(q * (2 * N + 4 * N * N) * mu, 1e-300))),
    }


# ----------------------------------------------------------------------
# rates and traces
# ----------------------------------------------------------------------
def fit_rate(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``log y = slope log x + intercept``; returns (slope, intercept, R^2)."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if len(lx) < 2:
        raise ValueError("need at least two points for a rate")
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - float(resid @ resid) / ss if ss > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


@dataclass
class SuperconvergenceReport:
    h: np.ndarray
    dofs: np.ndarray
    superconvergent: np.ndarray  # ||Pi_h u - Lambda_h u||
    source: np.ndarray  # ||Pi_h u - T_h^lambda u||
    sigma_error: np.ndarray  # ||sigma - G_h(T_h^lambda u)||_Sigma
    rate_super: float
    rate_source: float
    rate_sigma: float

    @property
    def gain(self) -> float:
        return self.rate_super - self.rate_sigma


def sigma_norm_error(sys: MixedSystem, exact: ExactEigenpair, s: np.ndarray, order: int | None = None) -> float:
    """``||grad u - s||^2 + ||div grad u - div s||^2`` (square root), with
    ``div grad u = -lambda u`` for the exact eigenfunction."""
    mesh, dofs = sys.mesh, sys.dofs
    rule = triangle_rule(_order(dofs, order))
    X = physical_points(mesh, rule.points)
    sv = sigma_basis(mesh, dofs, rule.points)
    cs = dofs.local_sigma(s)
    val = np.einsum("tqbi,tb->tqi", sv.values, cs)
    div = np.einsum("tqb,tb->tq", sv.div, cs)
    x, y = X[..., 0], X[..., 1]
    e0 = exact.grad(x, y) - val
    e1 = -exact.lam * exact.u(x, y) - div
    wdet = rule.weights[None, :] * mesh.dets[:, None]
    return math.sqrt(float(np.einsum("tq,tqi,tqi->", wdet, e0, e0) + np.einsum("tq,tq,tq->", wdet, e1, e1)))


def superconvergence_report(systems: Sequence[MixedSystem], clusters: Sequence[EigenCluster], exact: ExactEigenpair) -> SuperconvergenceReport:
    """Observed rates (in ``h_max``) on a sequence of meshes."""
    if len(systems) < 3:
        raise ValueError("a rate fit needs at least three levels")
    h, nd, sc, src, se = [], [], [], [], []
    for sys, cl in zip(systems, clusters):
        pi_u = l2_project(sys.mesh, sys.dofs, exact.u, order=_order(sys.dofs, None))
        s, t = solve_source(sys, pi_u, exact.lam)
        lu = cl.u @ project_cluster(sys, cl, t)
        M = sys.M
        sc.append(math.sqrt(max(float((pi_u - lu) @ (M @ (pi_u - lu))), 0.0)))
        src.append(math.sqrt(max(float((pi_u - t) @ (M @ (pi_u - t))), 0.0)))
        se.append(sigma_norm_error(sys, exact, s))
        h.append(float(sys.mesh.diameters.max()))
        nd.append(sys.n_sigma + sys.n_u)
    return SuperconvergenceReport(
        h=np.array(h),
        dofs=np.array(nd),
        superconvergent=np.array(sc),
        source=np.array(src),
        sigma_error=np.array(se),
        rate_super=fit_rate(h, sc)[0],
        rate_source=fit_rate(h, src)[0],
        rate_sigma=fit_rate(h, se)[0],
    )


def contraction_trace(mu2: Sequence[float], d2: Sequence[float], beta: float = 1.0) -> np.ndarray:
    """Ratios ``xi_{l+1}^2 / xi_l^2`` with ``xi^2 = mu^2 + beta d^2``."""
    mu2 = np.asarray(mu2, float)
    d2 = np.asarray(d2, float)
    if mu2.size != d2.size:
        raise ValueError("mu2 and d2 must have equal length")
    xi2 = mu2 + beta * d2
    return xi2[1:] / xi2[:-1]


def eigenvalue_gap_check(eig_errors: Sequence[float], deltas: Sequence[float]) -> dict:
    """Ratios ``r_l = eig_error_l / delta_l^2`` and their spread max/min.

    Levels with ``delta = 0`` are skipped (both sides vanish there).
    """
    e = np.asarray(eig_errors, float)
    d = np.asarray(deltas, float)
    ok = d > 0
    r = np.full_like(e, np.nan)
    r[ok] = e[ok] / d[ok] ** 2
    good = r[ok]
    spread = float(good.max() / good.min()) if good.size and good.min() > 0 else float("nan")
    return {"ratios": r, "spread": spread}


def prolongate(fine: Mesh, coarse: Mesh, coarse_dofs: DofMap, pair: DiscretePair, ref_pts: np.ndarray, anc: np.ndarray | None = None):
    """Values and discrete gradients of a coarse ``M_h`` function at fine quadrature points."""
    if anc is None:
        anc = ancestor_map(fine, coarse)
    X = physical_points(fine, ref_pts)
    R = reference_coordinates(coarse, anc, X)
    phi, _ = scalar_basis(coarse, coarse_dofs, R, elements=anc)
    sv = sigma_basis(coarse, coarse_dofs, R, elements=anc)
    v = np.einsum("tqb,tb->tq", phi, coarse_dofs.local_u(pair.u)[anc])
    g = np.einsum("tqbi,tb->tqi", sv.values, coarse_dofs.local_sigma(pair.sigma)[anc])
    return v, g


def cross_mesh_distance(fine_sys: MixedSystem, fine_pair: DiscretePair, coarse_sys: MixedSystem, coarse_pair: DiscretePair, order: int | None = None) -> float:
    """``d(v_h, w_H)`` for nested meshes, integrated on the fine mesh."""
    mesh, dofs = fine_sys.mesh, fine_sys.dofs
    rule = triangle_rule(_order(dofs, order))
    X = physical_points(mesh, rule.points)
    v0, g0 = _evaluate(fine_pair, mesh, dofs, rule.points, X)
    v1, g1 = prolongate(mesh, coarse_sys.mesh, coarse_sys.dofs, coarse_pair, rule.points)
    wdet = rule.weights[None, :] * mesh.dets[:, None]
    dv, dg = v0 - v1, g0 - g1
    return math.sqrt(max(float(np.einsum("tq,tq,tq->", wdet, dv, dv) + np.einsum("tq,tqi,tqi->", wdet, dg, dg)), 0.0))


def quasi_orthogonality_trace(systems: Sequence[MixedSystem], diagnostics: Sequence[LevelDiagnostics]) -> dict:
    """Residuals of the quasi-orthogonality identity between consecutive levels.

    For each member and level pair (H coarse, h fine)::

        r = d(Lh u, LH u)^2 - [d(u, LH u)^2 - d(u, Lh u)^2]

    and the multiplier ``r / (h_max * (d(u,Lh u)^2 + d(u,LH u)^2))``.
    """
    residual, multiplier = [], []
    for l in range(len(systems) - 1):
        cs, fs = systems[l], systems[l + 1]
        cd, fd = diagnostics[l], diagnostics[l + 1]
        r_sum, scale = 0.0, 0.0
        for ci, fi in zip(cd.images, fd.images):
            dh = distance(fs.mesh, fs.dofs, fi.exact, fi.pair)
            dH = distance(cs.mesh, cs.dofs, ci.exact, ci.pair)
            cross = cross_mesh_distance(fs, fi.pair, cs, ci.pair)
            r_sum += cross**2 - (dH**2 - dh**2)
            scale += dh**2 + dH**2
        residual.append(r_sum)
        multiplier.append(r_sum / (fd.h_max * scale))
    return {"residual": np.array(residual), "multiplier": np.array(multiplier)}
