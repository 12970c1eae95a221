"""Sparse matrices of the mixed Laplace system and related discrete operators."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import (
    DofMap,
    FeDegree,
    build_dofmap,
    physical_points,
    scalar_basis,
    sigma_basis,
    triangle_rule,
)
from .mesh import Mesh


@dataclass(eq=False)
class MixedSystem:
    """``A`` = (sigma, tau), ``B`` = (div tau, v), ``M`` = (u, v) on one mesh.

    Factorizations of ``A`` and of the saddle-point matrix are computed on
    first use and reused for every solve on this mesh.
    """

    mesh: Mesh
    dofs: DofMap
    A: sp.csr_matrix
    B: sp.csr_matrix
    M: sp.csr_matrix
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_sigma(self) -> int:
        return self.dofs.n_sigma

    @property
    def n_u(self) -> int:
        return self.dofs.n_u

    @cached_property
    def A_factor(self):
        return spla.splu(self.A.tocsc())

    @cached_property
    def saddle_factor(self):
        K = sp.bmat([[self.A, self.B.T], [self.B, None]], format="csc")
        return spla.splu(K)

    def solve_A(self, rhs: np.ndarray) -> np.ndarray:
        return self.A_factor.solve(np.asarray(rhs, dtype=float))

    def schur_apply(self, u: np.ndarray) -> np.ndarray:
        """``B A^{-1} B^T u``."""
        return self.B @ self.solve_A(self.B.T @ u)

    def schur_solve(self, y: np.ndarray) -> np.ndarray:
        """Solve ``B A^{-1} B^T x = y`` through the saddle-point system."""
        y = np.asarray(y, dtype=float)
        rhs = np.concatenate([np.zeros((self.n_sigma,) + y.shape[1:]), -y])
        return self.saddle_factor.solve(rhs)[self.n_sigma :]

    def schur_dense(self) -> np.ndarray:
        X = self.solve_A(self.B.T.toarray())
        S = self.B @ X
        return 0.5 * (S + S.T)


def _to_csr(rows, cols, vals, shape) -> sp.csr_matrix:
    mat = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()
    mat.sum_duplicates()
    return mat


def assemble(mesh: Mesh, dofs: DofMap | FeDegree) -> MixedSystem:
    """Assemble ``A``, ``B``, ``M`` with quadrature of order ``2k+2``."""
    if isinstance(dofs, FeDegree):
        dofs = build_dofmap(mesh, dofs)
    deg = dofs.degree
    rule = triangle_rule(deg.quad_order)
    sv = sigma_basis(mesh, dofs, rule.points)
    phi, _ = scalar_basis(mesh, dofs, rule.points)
    wdet = rule.weights[None, :] * mesh.dets[:, None]  # (T, nq)

    A_loc = np.einsum("tq,tqai,tqbi->tab", wdet, sv.values, sv.values)
    A_loc = 0.5 * (A_loc + np.transpose(A_loc, (0, 2, 1)))
    B_loc = np.einsum("tq,tqv,tqb->tvb", wdet, phi, sv.div)
    M_loc = np.einsum("tq,tqv,tqw->tvw", wdet, phi, phi)

    si, ui = dofs.sigma_ids, dofs.u_ids
    nb, nu = si.shape[1], ui.shape[1]
    A = _to_csr(
        np.repeat(si[:, :, None], nb, 2), np.repeat(si[:, None, :], nb, 1), A_loc,
        (dofs.n_sigma, dofs.n_sigma),
    )
    A = 0.5 * (A + A.T)
    B = _to_csr(
        np.repeat(ui[:, :, None], nb, 2), np.repeat(si[:, None, :], nu, 1), B_loc,
        (dofs.n_u, dofs.n_sigma),
    )
    M = _to_csr(
        np.repeat(ui[:, :, None], nu, 2), np.repeat(ui[:, None, :], nu, 1), M_loc,
        (dofs.n_u, dofs.n_u),
    )
    return MixedSystem(mesh, dofs, A.tocsr(), B, M)


def discrete_gradient(sys: MixedSystem, w: np.ndarray) -> np.ndarray:
    """``G_h(w)``: the ``g`` with ``A g + B^T w = 0``."""
    return -sys.solve_A(sys.B.T @ np.asarray(w, dtype=float))


def l2_project(
    mesh: Mesh, dofs: DofMap, f: Callable[[np.ndarray, np.ndarray], np.ndarray], order: int | None = None
) -> np.ndarray:
    """Coefficients of the L2 projection of ``f(x, y)`` onto ``M_h``."""
    rule = triangle_rule(dofs.degree.quad_order if order is None else order)
    X = physical_points(mesh, rule.points)
    fx = np.asarray(f(X[..., 0], X[..., 1]), dtype=float)
    phi, _ = scalar_basis(mesh, dofs, rule.points)
    wdet = rule.weights[None, :] * mesh.dets[:, None]
    load = np.einsum("tq,tq,tqv->tv", wdet, fx, phi)
    diag = np.einsum("tq,tqv,tqv->tv", wdet, phi, phi)
    out = np.empty(dofs.n_u)
    out[dofs.u_ids] = load / diag
    return out


def export_matrix_market(sys: MixedSystem, directory) -> None:
    """Write ``A.mtx``, ``B.mtx`` and ``M.mtx`` (coordinate format)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("A", "B", "M"):
        scipy.io.mmwrite(directory / f"{name}.mtx", getattr(sys, name).tocoo())
