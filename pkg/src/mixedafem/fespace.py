"""
Mixed finite element spaces on triangles.

``Sigma_h`` is Raviart-Thomas ``RT_k`` (or ``BDM_{k+1}``) and ``M_h`` is the
discontinuous ``P_k``.  Reference bases are obtained from a generalized
Vandermonde matrix of the degree-of-freedom functionals and are mapped to
physical triangles with the contravariant Piola transform.

Edge degrees of freedom are the moments ``int_E (tau . n_E) L_s ds`` against
the Lagrange polynomials ``L_s`` at the Gauss points of ``E``, with ``n_E``
the clockwise rotation of the global tangent (lower to higher vertex index).
Both triangles sharing an edge therefore see the same functional.

Scalar basis functions are L2-orthogonal on each triangle and the first one
is the constant 1, so the first coefficient of a function in ``M_h`` is its
element mean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mesh import Mesh

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


# ----------------------------------------------------------------------
# quadrature
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class QuadratureRule:
    """Reference-triangle rule; ``points`` are (x, y) on the unit triangle."""

    points: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def barycentric(self) -> np.ndarray:
        x, y = self.points.T
        return np.stack([1 - x - y, x, y], axis=1)


@lru_cache(maxsize=None)
def gauss_line(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(order: int) -> QuadratureRule:
    """Collapsed Gauss rule exact for polynomials of total degree ``order``."""
    n = max(1, math.ceil((order + 2) / 2))
    s, w = gauss_line(n)
    u, v = np.meshgrid(s, s, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    x = u.ravel()
    y = (v * (1 - u)).ravel()
    weights = (wu * wv * (1 - u)).ravel()
    return QuadratureRule(np.stack([x, y], axis=1), weights, order)


# ----------------------------------------------------------------------
# degrees
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class FeDegree:
    """``family`` is 'RT' or 'BDM'; ``k`` is the degree of ``M_h = P_k``.

    ``FeDegree('BDM', 0)`` is BDM_1 paired with P_0.
    """

    family: str = "RT"
    k: int = 0

    def __post_init__(self):
        if self.family not in ("RT", "BDM"):
            raise ValueError(f"unsupported family {self.family!r}")
        if self.k < 0 or (self.family == "RT" and self.k > 3) or (self.family == "BDM" and self.k != 0):
            raise ValueError(f"unsupported degree {self.name}")

    @classmethod
    def parse(cls, text: str) -> "FeDegree":
        t = text.strip().lower()
        if t.startswith("rt") and t[2:].isdigit():
            return cls("RT", int(t[2:]))
        if t.startswith("bdm") and t[3:].isdigit():
            return cls("BDM", int(t[3:]) - 1)
        raise ValueError(f"unknown element {text!r}")

    @property
    def name(self) -> str:
        return f"rt{self.k}" if self.family == "RT" else f"bdm{self.k + 1}"

    @property
    def sigma_degree(self) -> int:
        return self.k + 1

    @property
    def edge_dofs(self) -> int:
        return self.k + 1 if self.family == "RT" else self.k + 2

    @property
    def interior_dofs(self) -> int:
        return self.k * (self.k + 1) if self.family == "RT" else 0

    @property
    def n_local_sigma(self) -> int:
        return 3 * self.edge_dofs + self.interior_dofs

    @property
    def n_local_u(self) -> int:
        return (self.k + 1) * (self.k + 2) // 2

    @property
    def quad_order(self) -> int:
        return 2 * self.k + 2


# ----------------------------------------------------------------------
# reference bases
# ----------------------------------------------------------------------
def _scalar_exponents(p: int) -> list[tuple[int, int]]:
    return [(d - b, b) for d in range(p + 1) for b in range(d + 1)]


def _vector_monomials(deg: FeDegree) -> list[list[tuple[int, float, int, int]]]:
    """Each monomial is a list of terms (component, coefficient, a, b)."""
    p = deg.k if deg.family == "RT" else deg.k + 1
    monos = []
    for c in (0, 1):
        for a, b in _scalar_exponents(p):
            monos.append([(c, 1.0, a, b)])
    if deg.family == "RT":
        for a in range(deg.k + 1):
            b = deg.k - a
            monos.append([(0, 1.0, a + 1, b), (1, 1.0, a, b + 1)])
    return monos


def _pow(x: np.ndarray, n: int) -> np.ndarray:
    return x**n if n > 0 else np.ones_like(x)


def _eval_vector_monomials(monos, X: np.ndarray):
    """Values (..., m, 2) and Jacobians (..., m, 2, 2) at points X (..., 2)."""
    x, y = X[..., 0], X[..., 1]
    shape = X.shape[:-1]
    val = np.zeros(shape + (len(monos), 2))
    jac = np.zeros(shape + (len(monos), 2, 2))
    for m, terms in enumerate(monos):
        for c, coef, a, b in terms:
            val[..., m, c] += coef * _pow(x, a) * _pow(y, b)
            if a:
                jac[..., m, c, 0] += coef * a * _pow(x, a - 1) * _pow(y, b)
            if b:
                jac[..., m, c, 1] += coef * b * _pow(x, a) * _pow(y, b - 1)
    return val, jac


def _ref_edge(i: int):
    start = REF_VERTICES[(i + 1) % 3]
    end = REF_VERTICES[(i + 2) % 3]
    d = end - start
    length = float(np.hypot(*d))
    normal = np.array([d[1], -d[0]]) / length
    return start, end, length, normal


def edge_points(i: int, s: np.ndarray) -> np.ndarray:
    """Reference points on local edge ``i`` at parameters ``s`` in [0, 1]."""
    start, end, _, _ = _ref_edge(i)
    return start[None, :] + np.asarray(s)[:, None] * (end - start)[None, :]


@dataclass(frozen=True)
class ReferenceElement:
    degree: FeDegree
    monomials: tuple
    coeffs: np.ndarray  # (n_mono, nb): basis = monomials @ coeffs
    scalar_exponents: tuple
    scalar_coeffs: np.ndarray  # (n_scalar_mono, nu)

    def sigma(self, X: np.ndarray):
        """Reference values (..., nb, 2) and Jacobians (..., nb, 2, 2)."""
        val, jac = _eval_vector_monomials(self.monomials, X)
        val = np.einsum("...mi,mb->...bi", val, self.coeffs)
        jac = np.einsum("...mij,mb->...bij", jac, self.coeffs)
        return val, jac

    def scalar(self, X: np.ndarray):
        """Values (..., nu) and reference gradients (..., nu, 2)."""
        x, y = X[..., 0], X[..., 1]
        shape = X.shape[:-1]
        n = len(self.scalar_exponents)
        val = np.zeros(shape + (n,))
        grad = np.zeros(shape + (n, 2))
        for m, (a, b) in enumerate(self.scalar_exponents):
            val[..., m] = _pow(x, a) * _pow(y, b)
            if a:
                grad[..., m, 0] = a * _pow(x, a - 1) * _pow(y, b)
            if b:
                grad[..., m, 1] = b * _pow(x, a) * _pow(y, b - 1)
        return val @ self.scalar_coeffs, np.einsum("...mj,mb->...bj", grad, self.scalar_coeffs)


@lru_cache(maxsize=None)
def reference_element(deg: FeDegree) -> ReferenceElement:
    monos = _vector_monomials(deg)
    nb = deg.n_local_sigma
    if len(monos) != nb:
        raise AssertionError("dimension mismatch in reference space")
    V = np.zeros((nb, len(monos)))
    s, w = gauss_line(deg.edge_dofs)
    row = 0
    for i in range(3):
        _, _, length, normal = _ref_edge(i)
        val, _ = _eval_vector_monomials(monos, edge_points(i, s))
        flux = val @ normal  # (nq, m)
        for q in range(deg.edge_dofs):
            V[row] = w[q] * length * flux[q]
            row += 1
    if deg.interior_dofs:
        rule = triangle_rule(2 * deg.sigma_degree + 2)
        val, _ = _eval_vector_monomials(monos, rule.points)
        for c in (0, 1):
            for a, b in _scalar_exponents(deg.k - 1):
                q = rule.points[:, 0] ** a * rule.points[:, 1] ** b
                V[row] = np.einsum("q,q,qm->m", rule.weights, q, val[:, :, c])
                row += 1
    coeffs = np.linalg.solve(V, np.eye(nb))

    # L2-orthogonal scalar basis on the reference triangle, first function 1
    exps = _scalar_exponents(deg.k)
    rule = triangle_rule(2 * deg.k + 2)
    P = np.stack([rule.points[:, 0] ** a * rule.points[:, 1] ** b for a, b in exps], axis=1)
    G = P.T @ (rule.weights[:, None] * P)
    n = len(exps)
    S = np.zeros((n, n))
    for j in range(n):
        v = np.zeros(n)
        v[j] = 1.0
        for i in range(j):
            v -= (S[:, i] @ G @ v) / (S[:, i] @ G @ S[:, i]) * S[:, i]
        S[:, j] = v
    return ReferenceElement(deg, tuple(tuple(t) for t in monos), coeffs, tuple(exps), S)


# ----------------------------------------------------------------------
# degree-of-freedom map
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class DofMap:
    degree: FeDegree
    n_sigma: int
    n_u: int
    sigma_ids: np.ndarray  # (T, nb)
    sigma_signs: np.ndarray  # (T, nb)
    u_ids: np.ndarray  # (T, nu)
    n_edges: int

    def local_sigma(self, coeffs: np.ndarray) -> np.ndarray:
        """Element coefficients (T, nb[, m]) of global Sigma_h vectors.

        Orientation signs live in :func:`sigma_basis`, not here.
        """
        return np.asarray(coeffs)[self.sigma_ids]

    def local_u(self, coeffs: np.ndarray) -> np.ndarray:
        return np.asarray(coeffs)[self.u_ids]


def build_dofmap(mesh: Mesh, deg: FeDegree) -> DofMap:
    """Global numbering: edge dofs first, then element-interior dofs."""
    topo = mesh.topology
    T = mesh.n_triangles
    ne, ni = deg.edge_dofs, deg.interior_dofs
    ids = np.empty((T, deg.n_local_sigma), dtype=int)
    signs = np.ones((T, deg.n_local_sigma))
    s = np.arange(ne)
    for i in range(3):
        e = topo.edge_of_triangle[:, i]
        sg = topo.edge_sign[:, i]
        slot = np.where(sg[:, None] > 0, s[None, :], ne - 1 - s[None, :])
        ids[:, i * ne : (i + 1) * ne] = ne * e[:, None] + slot
        signs[:, i * ne : (i + 1) * ne] = sg[:, None]
    n_edge_total = ne * topo.n_edges
    if ni:
        ids[:, 3 * ne :] = n_edge_total + ni * np.arange(T)[:, None] + np.arange(ni)[None, :]
    nu = deg.n_local_u
    return DofMap(
        degree=deg,
        n_sigma=n_edge_total + ni * T,
        n_u=nu * T,
        sigma_ids=ids,
        sigma_signs=signs,
        u_ids=nu * np.arange(T)[:, None] + np.arange(nu)[None, :],
        n_edges=topo.n_edges,
    )


# ----------------------------------------------------------------------
# physical evaluation
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SigmaValues:
    values: np.ndarray  # (T, nq, nb, 2)
    div: np.ndarray  # (T, nq, nb)
    curl: np.ndarray  # (T, nq, nb)


def _expand_points(ref_pts: np.ndarray, T: int) -> np.ndarray:
    ref_pts = np.asarray(ref_pts, dtype=float)
    if ref_pts.ndim == 2:
        return ref_pts
    if ref_pts.shape[0] != T:
        raise ValueError("per-element points must have leading dimension T")
    return ref_pts


def sigma_basis(
    mesh: Mesh, dofs: DofMap, ref_pts: np.ndarray, elements: np.ndarray | None = None
) -> SigmaValues:
    """Signed physical Sigma_h basis on each element via the Piola map.

    ``ref_pts`` is (nq, 2) shared by all elements or (T, nq, 2) per element.
    """
    ref = reference_element(dofs.degree)
    el = np.arange(mesh.n_triangles) if elements is None else np.asarray(elements)
    J = mesh.jacobians[el]
    det = mesh.dets[el]
    X = _expand_points(ref_pts, len(el))
    v_hat, jac_hat = ref.sigma(X)
    if X.ndim == 2:
        vals = np.einsum("tij,qbj->tqbi", J, v_hat)
        grad = np.einsum("tij,qbjk->tqbik", J, jac_hat)
        div_hat = jac_hat[..., 0, 0] + jac_hat[..., 1, 1]
        div = np.broadcast_to(div_hat[None], (len(el),) + div_hat.shape)
    else:
        vals = np.einsum("tij,tqbj->tqbi", J, v_hat)
        grad = np.einsum("tij,tqbjk->tqbik", J, jac_hat)
        div = jac_hat[..., 0, 0] + jac_hat[..., 1, 1]
    Jinv = np.linalg.inv(J)
    grad = np.einsum("tqbik,tkl->tqbil", grad, Jinv)
    inv_det = (1.0 / det)[:, None, None]
    sg = dofs.sigma_signs[el][:, None, :]
    vals = vals * (inv_det * sg)[..., None]
    div = div * inv_det * sg
    curl = (grad[..., 0, 1] - grad[..., 1, 0]) * inv_det * sg
    return SigmaValues(vals, div, curl)


def scalar_basis(mesh: Mesh, dofs: DofMap, ref_pts: np.ndarray, elements: np.ndarray | None = None):
    """M_h basis values (T|1, nq, nu) and physical gradients (T, nq, nu, 2)."""
    ref = reference_element(dofs.degree)
    el = np.arange(mesh.n_triangles) if elements is None else np.asarray(elements)
    X = _expand_points(ref_pts, len(el))
    val, grad_hat = ref.scalar(X)
    JinvT = np.transpose(np.linalg.inv(mesh.jacobians[el]), (0, 2, 1))
    if X.ndim == 2:
        grad = np.einsum("tij,qbj->tqbi", JinvT, grad_hat)
        val = np.broadcast_to(val[None], (len(el),) + val.shape)
    else:
        grad = np.einsum("tij,tqbj->tqbi", JinvT, grad_hat)
    return val, grad


def physical_points(mesh: Mesh, ref_pts: np.ndarray, elements: np.ndarray | None = None) -> np.ndarray:
    """Map reference points to (T, nq, 2) physical coordinates."""
    el = np.arange(mesh.n_triangles) if elements is None else np.asarray(elements)
    p0 = mesh.vertices[mesh.triangles[el, 0]]
    X = _expand_points(ref_pts, len(el))
    if X.ndim == 2:
        return p0[:, None, :] + np.einsum("tij,qj->tqi", mesh.jacobians[el], X)
    return p0[:, None, :] + np.einsum("tij,tqj->tqi", mesh.jacobians[el], X)


def reference_coordinates(mesh: Mesh, elements: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Inverse affine map of physical points (T, nq, 2) into their elements."""
    el = np.asarray(elements)
    p0 = mesh.vertices[mesh.triangles[el, 0]]
    Jinv = np.linalg.inv(mesh.jacobians[el])
    return np.einsum("tij,tqj->tqi", Jinv, pts - p0[:, None, :])


def eval_basis(deg: FeDegree, vertices: np.ndarray, point: np.ndarray):
    """Physical RT/BDM basis on a single triangle at one barycentric point.

    Returns ``(values (nb, 2), divergence (nb,), curl (nb,))`` for the local
    (unsigned) basis, with local edge ``i`` opposite ``vertices[i]``.
    """
    vertices = np.asarray(vertices, dtype=float)
    bary = np.asarray(point, dtype=float)
    J = np.stack([vertices[1] - vertices[0], vertices[2] - vertices[0]], axis=1)
    det = float(np.linalg.det(J))
    if abs(det) < 1e-14 * max(np.ptp(vertices, axis=0).max(), 1e-300) ** 2:
        raise ValueError("degenerate triangle")
    X = bary[1:][None, :]
    ref = reference_element(deg)
    v_hat, jac_hat = ref.sigma(X)
    vals = (J @ v_hat[0].T).T / det
    div = (jac_hat[0, :, 0, 0] + jac_hat[0, :, 1, 1]) / det
    grad = np.einsum("ij,bjk,kl->bil", J, jac_hat[0], np.linalg.inv(J)) / det
    return vals, div, grad[:, 0, 1] - grad[:, 1, 0]
