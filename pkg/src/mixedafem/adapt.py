"""Doerfler marking and the adaptive solve / estimate / mark / refine loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .assembly import MixedSystem, assemble
from .eigsolve import ClusterSpec, EigenCluster, EigenSolverError, solve_cluster
from .estimator import IndicatorField, estimate
from .fespace import FeDegree, build_dofmap
from .mesh import Mesh, refine
from . import verify

log = logging.getLogger(__name__)


def dorfler_mark(indicators, theta: float) -> np.ndarray:
    """Smallest set of elements carrying a ``theta`` fraction of the total.

    ``indicators`` is an :class:`IndicatorField` (summed over the cluster)
    or a 1-D array of nonnegative per-element values.  Elements are taken
    in order of decreasing value, ties broken by ascending element id; the
    shortest prefix reaching the bulk is returned (sorted).  All-zero input
    gives an empty set.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    vals = indicators.per_element if isinstance(indicators, IndicatorField) else np.asarray(indicators, float)
    if vals.ndim != 1:
        raise ValueError("expected one value per element")
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ValueError("indicators must be finite and nonnegative")
    total = vals.sum()
    if total <= 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(vals.size), -vals))
    csum = np.cumsum(vals[order])
    # first prefix with csum >= theta * total; guard against round-off at theta = 1
    target = theta * total
    n = int(np.searchsorted(csum, target * (1 - 1e-14), side="left")) + 1
    n = min(n, int(np.count_nonzero(vals)))
    return np.sort(order[:n])


def bulk_satisfied(per_element: np.ndarray, marked, theta: float, rtol: float = 1e-12) -> bool:
    vals = np.asarray(per_element, float)
    idx = np.asarray(marked, dtype=int)
    return bool(vals[idx].sum() >= theta * vals.sum() * (1 - rtol))


@dataclass
class AfemConfig:
    """Parameters of an adaptive run.

    ``exact`` holds the continuous eigenpairs used when ``diagnostics`` is
    on; ``beta`` weights the distance term in the contraction quantity.
    """

    theta: float = 0.5
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    degree: FeDegree = field(default_factory=FeDegree)
    max_levels: int = 50
    max_dofs: int = 200_000
    eta_tol: float = 0.0
    diagnostics: bool = False
    exact: tuple = ()
    beta: float = 1.0
    keep_systems: bool = True

    def __post_init__(self):
        if not (isinstance(self.theta, (int, float)) and 0.0 < self.theta <= 1.0):
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if self.max_levels < 0 or self.max_dofs < 1:
            raise ValueError("max_levels must be >= 0 and max_dofs >= 1")
        if self.eta_tol < 0:
            raise ValueError("eta_tol must be nonnegative")
        if self.diagnostics and len(self.exact) != self.cluster.size:
            raise ValueError("diagnostics need one exact eigenpair per cluster member")


@dataclass
class LevelRecord:
    level: int
    card_T: int
    n_sigma: int
    n_u: int
    lambdas: tuple
    eta2: float
    card_M: int
    wall_ms: float
    d2: float | None = None
    delta: float | None = None
    mu2: float | None = None
    xi2: float | None = None

    @property
    def n_dofs(self) -> int:
        return self.n_sigma + self.n_u


@dataclass
class LevelData:
    """Per-level artifacts kept in memory for post-processing."""

    mesh: Mesh
    system: MixedSystem | None
    cluster: EigenCluster
    field: IndicatorField
    marked: np.ndarray
    diagnostics: object = None
    energy_residual: float = 0.0  # max_j | |sigma_j|_a^2 - lambda_j | / lambda_j
    ortho_residual: float = 0.0  # max |U^T M U - I|


DIAG_COLUMNS = ["d2", "delta", "mu2", "xi2"]


def history_header(n_members: int, diagnostics: bool) -> list[str]:
    cols = ["level", "card_T", "n_sigma", "n_u"]
    cols += [f"lambda_{j}" for j in range(1, n_members + 1)]
    cols += ["eta2", "card_M", "wall_ms"]
    return cols + (DIAG_COLUMNS if diagnostics else [])


def _fmt(x) -> str:
    return repr(float(x))


@dataclass
class AfemHistory:
    config: AfemConfig
    records: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    status: str = "running"
    message: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name.startswith("lambda_"):
            j = int(name.split("_")[1]) - 1
            return np.array([r.lambdas[j] for r in self.records])
        if name == "dofs":
            return np.array([r.n_dofs for r in self.records])
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def has_diagnostics(self) -> bool:
        return bool(self.records) and self.records[0].d2 is not None

    def to_csv(self, path) -> None:
        n = self.config.cluster.size
        diag = self.has_diagnostics
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(history_header(n, diag))
            for r in self.records:
                row = [r.level, r.card_T, r.n_sigma, r.n_u, *map(_fmt, r.lambdas), _fmt(r.eta2), r.card_M, f"{r.wall_ms:.3f}"]
                if diag:
                    row += [_fmt(getattr(r, c)) for c in DIAG_COLUMNS]
                wr.writerow(row)


def read_history(path) -> list[LevelRecord]:
    """Parse a history CSV written by :meth:`AfemHistory.to_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty history")
    header = rows[0]
    lam_cols = [i for i, h in enumerate(header) if h.startswith("lambda_")]
    n = len(lam_cols)
    for diag in (False, True):
        if header == history_header(n, diag):
            break
    else:
        raise ValueError(f"{path}: unexpected header {header}")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{line}: expected {len(header)} fields")
        d = dict(zip(header, row))
        try:
            rec = LevelRecord(
                level=int(d["level"]),
                card_T=int(d["card_T"]),
                n_sigma=int(d["n_sigma"]),
                n_u=int(d["n_u"]),
                lambdas=tuple(float(row[i]) for i in lam_cols),
                eta2=float(d["eta2"]),
                card_M=int(d["card_M"]),
                wall_ms=float(d["wall_ms"]),
                **{c: float(d[c]) for c in DIAG_COLUMNS if c in d},
            )
        except ValueError as exc:
            raise ValueError(f"{path}:{line}: {exc}") from exc
        out.append(rec)
    return out


def predicted_dofs(mesh: Mesh, degree: FeDegree) -> int:
    """``dim Sigma_h + dim M_h`` without building the dof map."""
    return degree.edge_dofs * mesh.topology.n_edges + (degree.interior_dofs + degree.n_local_u) * mesh.n_triangles


def run_afem(
    config: AfemConfig,
    initial: Mesh,
    on_level: Callable[[LevelRecord, LevelData], None] | None = None,
) -> AfemHistory:
    """Adaptive loop until a stop criterion.

    Stops after ``max_levels`` refinements, when the next mesh would exceed
    ``max_dofs``, when the total estimator drops to ``eta_tol``, when no
    element is marked, or when the cluster loses separation.  Solver
    failures are recorded in ``status`` / ``message``.
    """
    hist = AfemHistory(config)
    mesh = initial
    level = 0
    if predicted_dofs(mesh, config.degree) > config.max_dofs:
        hist.status = "max_dofs"
        hist.message = "initial mesh exceeds max_dofs"
        return hist
    while True:
        t0 = time.perf_counter()
        dofs = build_dofmap(mesh, config.degree)
        sys = assemble(mesh, dofs)
        try:
            cluster = solve_cluster(sys, config.cluster)
        except EigenSolverError as exc:
            hist.status = "solver_failure"
            hist.message = f"level {level}: {exc}"
            log.error(hist.message)
            break
        fld = estimate(mesh, dofs, cluster)
        eta2 = fld.total

        stop = None
        if not cluster.separated:
            stop = ("separation_lost", "; ".join(cluster.notes))
        elif level >= config.max_levels:
            stop = ("max_levels", "")
        elif eta2 <= config.eta_tol:
            stop = ("eta_tol", "")

        marked = np.empty(0, dtype=np.int64)
        new_mesh = None
        if stop is None:
            marked = dorfler_mark(fld.per_element, config.theta)
            if marked.size == 0:
                stop = ("converged", "all indicators vanish")
            else:
                new_mesh = refine(mesh, marked)
                if predicted_dofs(new_mesh, config.degree) > config.max_dofs:
                    stop = ("max_dofs", "")
        wall = (time.perf_counter() - t0) * 1e3

        diag = None
        extra = {}
        if config.diagnostics:
            diag = verify.level_diagnostics(sys, cluster, config.exact, config.beta)
            extra = dict(d2=diag.d2, delta=diag.delta, mu2=diag.mu2, xi2=diag.xi2)
        rec = LevelRecord(
            level=level,
            card_T=mesh.n_triangles,
            n_sigma=dofs.n_sigma,
            n_u=dofs.n_u,
            lambdas=tuple(float(v) for v in cluster.values),
            eta2=eta2,
            card_M=int(marked.size),
            wall_ms=wall,
            **extra,
        )
        a_norm = np.einsum("ij,ij->j", cluster.sigma, sys.A @ cluster.sigma)
        gram = cluster.u.T @ (sys.M @ cluster.u)
        data = LevelData(
            mesh, sys if config.keep_systems else None, cluster, fld, marked, diag,
            energy_residual=float(np.max(np.abs(a_norm - cluster.values) / cluster.values)),
            ortho_residual=float(np.abs(gram - np.eye(cluster.size)).max()),
        )
        hist.records.append(rec)
        hist.levels.append(data)
        log.info(
            "level %d: T=%d dofs=%d lambda=%s eta2=%.4e marked=%d",
            level, rec.card_T, rec.n_dofs, np.array2string(cluster.values, precision=8), eta2, rec.card_M,
        )
        if on_level is not None:
            on_level(rec, data)
        if stop is not None:
            hist.status, hist.message = stop
            break
        mesh = new_mesh
        level += 1
    return hist


def rate_table(records: Sequence[LevelRecord], columns: Sequence[str], trailing: int | None = None) -> dict:
    """Least-squares slopes of ``log column`` against ``log dofs``."""
    recs = list(records)[-trailing:] if trailing else list(records)
    if len(recs) < 3:
        raise ValueError("rates need at least three levels")
    dofs = np.array([r.n_dofs for r in recs], float)
    out = {}
    for c in columns:
        if c.startswith("lambda_"):
            y = np.array([r.lambdas[int(c.split("_")[1]) - 1] for r in recs])
        else:
            y = np.array([getattr(r, c) for r in recs], float)
        out[c] = verify.fit_rate(dofs, y)
    return out


def marked_near(mesh: Mesh, marked, point, radius: float) -> float:
    """Fraction of marked elements whose centroid lies within ``radius`` of ``point``."""
    marked = np.asarray(marked, dtype=int)
    if marked.size == 0:
        return math.nan
    c = mesh.centroids[marked]
    return float(np.mean(np.hypot(c[:, 0] - point[0], c[:, 1] - point[1]) < radius))
