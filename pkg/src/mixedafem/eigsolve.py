"""Discrete mixed eigenproblem and source problems.

The eigenproblem is reduced to the Schur form ``(B A^{-1} B^T) u = lambda M u``
and ``sigma = -A^{-1} B^T u``.  Small problems use a dense generalized
symmetric solver, larger ones shift-invert Lanczos around zero with the
saddle-point factorization as inner solver.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .assembly import MixedSystem

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000
DEGENERACY_RTOL = 1e-8


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    """Cluster ``J = {n+1, ..., n+size}`` (1-based eigenvalue indices).

    ``guard`` is the minimal relative gap to the neighbouring eigenvalues
    ``lambda_n`` and ``lambda_{n+size+1}``.
    """

    n: int = 0
    size: int = 1
    guard: float = 1e-3

    def __post_init__(self):
        if self.size < 1 or self.n < 0:
            raise ValueError("cluster needs n >= 0 and size >= 1")

    @classmethod
    def parse(cls, text: str, guard: float = 1e-3) -> "ClusterSpec":
        """``'a:b'`` selects eigenvalues a..b (inclusive, 1-based)."""
        first, _, last = text.partition(":")
        a = int(first)
        b = int(last) if last else a
        if a < 1 or b < a:
            raise ValueError(f"bad cluster {text!r}")
        return cls(n=a - 1, size=b - a + 1, guard=guard)

    @property
    def indices(self) -> list[int]:
        return list(range(self.n + 1, self.n + self.size + 1))

    @property
    def label(self) -> str:
        return f"{self.n + 1}:{self.n + self.size}"


@dataclass
class EigenCluster:
    """Discrete eigenpairs of one cluster; columns of ``u``/``sigma`` are members."""

    spec: ClusterSpec
    values: np.ndarray
    u: np.ndarray  # (n_u, N)
    sigma: np.ndarray  # (n_sigma, N)
    lower: float | None = None  # lambda_{h,n}
    upper: float | None = None  # lambda_{h,n+N+1}
    separated: bool = True
    notes: list = field(default_factory=list)

    @property
    def J(self) -> list[int]:
        return self.spec.indices

    @property
    def size(self) -> int:
        return len(self.values)

    def gaps(self) -> tuple[float, float]:
        """Relative gaps to the neighbouring discrete eigenvalues."""
        lo = np.inf if self.lower is None else (self.values[0] - self.lower) / self.values[0]
        hi = np.inf if self.upper is None else (self.upper - self.values[-1]) / self.values[-1]
        return float(lo), float(hi)


def _reference_vectors(n: int, m: int) -> np.ndarray:
    return np.random.default_rng(20160101).standard_normal((n, m))


def _canonical_basis(U: np.ndarray, M, values: np.ndarray) -> np.ndarray:
    """Fix signs and, inside numerically multiple eigenvalues, the basis.

    Inside a group the basis is the M-orthogonal projection of fixed
    reference vectors onto the eigenspace followed by Gram-Schmidt, which
    depends on the eigenspace only.
    """
    U = U.copy()
    n, m = U.shape
    F = _reference_vectors(n, m + 1)
    start = 0
    while start < m:
        stop = start + 1
        while stop < m and values[stop] - values[stop - 1] <= DEGENERACY_RTOL * abs(values[stop]):
            stop += 1
        block = U[:, start:stop]
        k = stop - start
        MB = M @ block
        if k > 1:
            P = block @ (MB.T @ F[:, :k])
            for j in range(k):
                v = P[:, j]
                for i in range(j):
                    v = v - (P[:, i] @ (M @ v)) * P[:, i]
                P[:, j] = v / np.sqrt(v @ (M @ v))
            block = P
        else:
            s = MB[:, 0] @ F[:, m]
            if s < 0:
                block = -block
        U[:, start:stop] = block
        start = stop
    return U


def lowest_eigenpairs(sys: MixedSystem, count: int, tol: float = 1e-12):
    """Lowest ``count`` eigenpairs ``(values, U)`` with ``U^T M U = I``."""
    if count > sys.n_u:
        raise EigenSolverError(f"requested {count} eigenpairs but dim(M_h) = {sys.n_u}")
    if sys.n_u <= DENSE_LIMIT or count >= sys.n_u - 1:
        S = sys.schur_dense()
        values, U = sla.eigh(S, sys.M.toarray(), subset_by_index=[0, count - 1])
    else:
        n = sys.n_u
        K = spla.LinearOperator((n, n), matvec=sys.schur_apply, dtype=float)
        Kinv = spla.LinearOperator((n, n), matvec=sys.schur_solve, dtype=float)
        v0 = np.ones(n)
        try:
            values, U = spla.eigsh(
                K, k=count, M=sys.M, sigma=0.0, OPinv=Kinv, which="LM", tol=tol, v0=v0
            )
        except spla.ArpackNoConvergence as exc:
            raise EigenSolverError(str(exc)) from exc
        order = np.argsort(values)
        values, U = values[order], U[:, order]
        # re-orthonormalize in the M inner product
        G = U.T @ (sys.M @ U)
        L = np.linalg.cholesky(0.5 * (G + G.T))
        U = np.linalg.solve(L, U.T).T
    return np.asarray(values), U


def solve_cluster(sys: MixedSystem, spec: ClusterSpec) -> EigenCluster:
    """Eigenpairs ``n+1 .. n+N`` with sorted values, M-orthonormal ``u``.

    The neighbour ``lambda_{n+N+1}`` is computed as well so the separation
    guard can be evaluated; a violated guard is recorded, not raised.
    """
    want = spec.n + spec.size + 1
    if want > sys.n_u:
        raise EigenSolverError(
            f"cluster {spec.label} needs dim(M_h) >= {want}, mesh has {sys.n_u}"
        )
    values, U = lowest_eigenpairs(sys, want)
    U = _canonical_basis(U, sys.M, values)
    sel = slice(spec.n, spec.n + spec.size)
    u = U[:, sel]
    sigma = -sys.solve_A(sys.B.T @ u)
    if sigma.ndim == 1:
        sigma = sigma[:, None]
    cl = EigenCluster(
        spec=spec,
        values=values[sel].copy(),
        u=u,
        sigma=sigma,
        lower=float(values[spec.n - 1]) if spec.n > 0 else None,
        upper=float(values[spec.n + spec.size]),
    )
    lo, hi = cl.gaps()
    if min(lo, hi) < spec.guard:
        cl.separated = False
        cl.notes.append(f"separation guard violated: gaps {lo:.3e}, {hi:.3e}")
        log.warning("cluster %s: %s", spec.label, cl.notes[-1])
    return cl


def solve_source(sys: MixedSystem, g: np.ndarray, lam: float = 1.0):
    """``(G_h(T_h^lam g), T_h^lam g)`` for ``g`` given by M_h coefficients.

    Solves ``A s + B^T u = 0``, ``B s = -lam M g``.
    """
    g = np.asarray(g, dtype=float)
    rhs = lam * (sys.M @ g)
    u = sys.schur_solve(rhs)
    s = -sys.solve_A(sys.B.T @ u)
    return s, u


def saddle_point_eigenvalues(sys: MixedSystem) -> np.ndarray:
    """All finite eigenvalues of the full saddle-point pencil (dense).

    ``[[A, B^T], [B, 0]] x = lambda [[0, 0], [0, -M]] x``; intended as an
    independent check of the Schur reduction on small meshes.
    """
    import scipy.sparse as sp

    K = sp.bmat([[sys.A, sys.B.T], [sys.B, None]]).toarray()
    R = np.zeros_like(K)
    R[sys.n_sigma :, sys.n_sigma :] = -sys.M.toarray()
    w = sla.eigvals(K, R)
    w = w[np.isfinite(w)]
    w = np.real(w[np.abs(w.imag) <= 1e-8 * np.maximum(1.0, np.abs(w.real))])
    return np.sort(w[w > 0])
