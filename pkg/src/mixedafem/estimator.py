"""
Residual error estimator for discrete mixed eigenfunctions.

For a pair ``(sigma_h, u_h)`` and a triangle ``T``::

    eta(T)^2 = ||h_T (sigma_h - grad u_h)||_T^2
             + ||h_T curl sigma_h||_T^2
             + sum_{E in edges(T)} h_E ||[sigma_h]_E . t_E||_E^2

with the plain trace on boundary edges.  Each edge term is charged to every
triangle containing the edge.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .fespace import DofMap, edge_points, gauss_line, scalar_basis, sigma_basis, triangle_rule
from .mesh import Mesh


@dataclass(frozen=True)
class IndicatorField:
    """Squared local indicators, one row per cluster member."""

    volume: np.ndarray  # (N, T)
    curl: np.ndarray  # (N, T)
    jump: np.ndarray  # (N, T)

    @property
    def eta2(self) -> np.ndarray:
        return self.volume + self.curl + self.jump

    @property
    def per_element(self) -> np.ndarray:
        """Indicators summed over the cluster, shape (T,)."""
        return self.eta2.sum(axis=0)

    @property
    def total(self) -> float:
        return float(self.eta2.sum())

    @property
    def n_members(self) -> int:
        return self.volume.shape[0]

    @property
    def n_elements(self) -> int:
        return self.volume.shape[1]


def _as_columns(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def indicator_terms(mesh: Mesh, dofs: DofMap, sigma: np.ndarray, u: np.ndarray) -> IndicatorField:
    """The three estimator terms for each column of ``sigma`` / ``u``."""
    sigma = _as_columns(sigma)
    u = _as_columns(u)
    if sigma.shape[0] != dofs.n_sigma or u.shape[0] != dofs.n_u:
        raise ValueError("coefficient vectors do not match the degree-of-freedom map")
    deg = dofs.degree
    hT = mesh.diameters

    rule = triangle_rule(deg.quad_order)
    sv = sigma_basis(mesh, dofs, rule.points)
    _, grad = scalar_basis(mesh, dofs, rule.points)
    cs = dofs.local_sigma(sigma)  # (T, nb, N)
    cu = dofs.local_u(u)  # (T, nu, N)
    s_val = np.einsum("tqbi,tbn->ntqi", sv.values, cs)
    s_curl = np.einsum("tqb,tbn->ntq", sv.curl, cs)
    if deg.k > 0:
        s_val = s_val - np.einsum("tqbi,tbn->ntqi", grad, cu)
    wdet = rule.weights[None, :] * mesh.dets[:, None]
    volume = hT**2 * np.einsum("tq,ntqi,ntqi->nt", wdet, s_val, s_val)
    curl = hT**2 * np.einsum("tq,ntq,ntq->nt", wdet, s_curl, s_curl)

    # tangential traces, points ordered along the global edge direction
    topo = mesh.topology
    s, w = gauss_line(deg.sigma_degree + 1)
    N = sigma.shape[1]
    traces = np.empty((3, mesh.n_triangles, len(s), N))
    for i in range(3):
        fwd = sigma_basis(mesh, dofs, edge_points(i, s)).values  # (T, nq, nb, 2)
        bwd = fwd[:, ::-1]
        e = topo.edge_of_triangle[:, i]
        tan = topo.tangent[e]
        vals = np.where((topo.edge_sign[:, i] > 0)[:, None, None, None], fwd, bwd)
        traces[i] = np.einsum("tqbj,tj,tbn->tqn", vals, tan, cs)
    t0, t1 = topo.triangles_of_edge[:, 0], topo.triangles_of_edge[:, 1]
    l0, l1 = topo.local_index[:, 0], topo.local_index[:, 1]
    jump_q = traces[l0, t0]
    interior = t1 >= 0
    jump_q[interior] -= traces[l1[interior], t1[interior]]
    L = topo.length
    per_edge = L**2 * np.einsum("q,eqn->ne", w, jump_q**2)  # h_E * |E| * mean
    jump = np.zeros((N, mesh.n_triangles))
    np.add.at(jump.T, t0, per_edge.T)
    np.add.at(jump.T, t1[interior], per_edge.T[interior])
    return IndicatorField(volume, curl, jump)


def estimate(mesh: Mesh, dofs: DofMap, cluster) -> IndicatorField:
    """Indicators ``eta_{h,j}(T)^2`` for every member of a computed cluster."""
    if cluster.u.shape[0] != dofs.n_u:
        raise ValueError("cluster was not computed on this mesh")
    return indicator_terms(mesh, dofs, cluster.sigma, cluster.u)


def aggregate(field: IndicatorField, subset: Iterable[int] | None = None) -> float:
    """``sum_j eta_j(subset)^2``; all elements when ``subset`` is None."""
    if subset is None:
        return field.total
    idx = np.asarray(list(subset) if not isinstance(subset, np.ndarray) else subset, dtype=int)
    return float(field.eta2[:, idx].sum())


CSV_HEADER = ["element", "member", "eta2", "volume", "curl", "jump", "marked"]


def write_indicator_csv(field: IndicatorField, path, marked: Iterable[int] = ()) -> None:
    """One row per (element, member) pair."""
    flags = np.zeros(field.n_elements, dtype=int)
    flags[np.asarray(list(marked), dtype=int)] = 1
    eta2 = field.eta2
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for t in range(field.n_elements):
            for j in range(field.n_members):
                wr.writerow(
                    [
                        t,
                        j + 1,
                        repr(float(eta2[j, t])),
                        repr(float(field.volume[j, t])),
                        repr(float(field.curl[j, t])),
                        repr(float(field.jump[j, t])),
                        flags[t],
                    ]
                )


def read_indicator_csv(path) -> tuple[IndicatorField, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_indicator_csv`.

    Returns the per-term field, the stored ``eta2`` column as an (N, T)
    array and the boolean mark flags.
    """
    data = np.atleast_1d(np.genfromtxt(Path(path), delimiter=",", names=True))
    el = data["element"].astype(int)
    mem = data["member"].astype(int) - 1
    T, N = el.max() + 1, mem.max() + 1
    parts = {}
    for name in ("volume", "curl", "jump", "eta2"):
        a = np.zeros((N, T))
        a[mem, el] = data[name]
        parts[name] = a
    raw = data["marked"].astype(int)
    n_set = np.bincount(el, weights=raw, minlength=T)
    n_rows = np.bincount(el, minlength=T)
    if np.any((n_set > 0) & (n_set < n_rows)):
        raise ValueError(f"{path}: member rows disagree on the mark flag")
    flags = n_set > 0
    eta2 = parts.pop("eta2")
    return IndicatorField(**parts), eta2, flags
