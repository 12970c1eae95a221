"""Pass/fail property checks over AFEM runs (in memory or from dumped files)."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.tri import Triangulation

from . import verify
from .adapt import AfemHistory, dorfler_mark, read_history
from .estimator import read_indicator_csv
from .mesh import Mesh, ancestor_map, read_mesh

BETAS = (0.1, 1.0, 10.0)


@dataclass
class CheckResult:
    name: str
    status: str  # pass | fail | skipped
    value: float | None = None
    detail: str = ""

    @property
    def failed(self) -> bool:
        return self.status == "fail"


def _check(name: str, ok: bool, value=None, detail: str = "") -> CheckResult:
    return CheckResult(name, "pass" if ok else "fail", None if value is None else float(value), detail)


def _skip(name: str, why: str) -> CheckResult:
    return CheckResult(name, "skipped", None, why)


def write_report(results: Sequence[CheckResult], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["check", "status", "value", "detail"])
        for r in results:
            wr.writerow([r.name, r.status, "" if r.value is None else repr(r.value), r.detail])


def format_report(results: Sequence[CheckResult]) -> str:
    width = max((len(r.name) for r in results), default=10)
    lines = []
    for r in results:
        val = "" if r.value is None else f"{r.value:.4g}"
        lines.append(f"{r.status.upper():8s} {r.name:{width}s} {val:>11s}  {r.detail}")
    return "\n".join(lines)


# ----------------------------------------------------------------------
# geometry helpers
# ----------------------------------------------------------------------
def nested_parents(fine: Mesh, coarse: Mesh, tol: float = 1e-10) -> np.ndarray | None:
    """Coarse triangle containing each fine triangle, or None if not nested."""
    tri = Triangulation(coarse.vertices[:, 0], coarse.vertices[:, 1], coarse.triangles)
    finder = tri.get_trifinder()
    c = fine.centroids
    parent = np.asarray(finder(c[:, 0], c[:, 1]))
    if np.any(parent < 0):
        return None
    # every fine vertex lies in the closed parent
    P = coarse.vertices[coarse.triangles[parent]]  # (T, 3, 2)
    J = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)
    V = fine.vertices[fine.triangles]  # (T, 3, 2)
    lam = np.linalg.solve(J[:, None], (V - P[:, None, 0])[..., None])[..., 0]
    bary = np.concatenate([1 - lam.sum(-1, keepdims=True), lam], axis=-1)
    if np.any(bary < -tol):
        return None
    return parent


# ----------------------------------------------------------------------
# checks on dumped run directories
# ----------------------------------------------------------------------
def audit_run_dir(run_dir) -> list[CheckResult]:
    """Re-verify marking and mesh invariants from the files of a ``run``."""
    run_dir = Path(run_dir)
    info = json.loads((run_dir / "run_info.json").read_text())
    theta = float(info["manifest"]["theta"])
    records = read_history(run_dir / "history.csv")
    out = []

    bad_terms, bad_total, bad_bulk, bad_min, bad_count = [], [], [], [], []
    for rec in records:
        path = run_dir / "indicators" / f"level_{rec.level:03d}.csv"
        try:
            fld, stored, flags = read_indicator_csv(path)
        except ValueError:
            bad_terms.append(rec.level)
            continue
        terms = fld.eta2
        if not np.allclose(stored, terms, rtol=1e-12, atol=0.0):
            bad_terms.append(rec.level)
        per = terms.sum(axis=0)
        if not math.isclose(per.sum(), rec.eta2, rel_tol=1e-10):
            bad_total.append(rec.level)
        if int(flags.sum()) != rec.card_M:
            bad_count.append(rec.level)
        if rec.card_M:
            marked = np.flatnonzero(flags)
            if per[marked].sum() < theta * per.sum() * (1 - 1e-12):
                bad_bulk.append(rec.level)
            if not np.array_equal(marked, dorfler_mark(per, theta)):
                bad_min.append(rec.level)
    out.append(_check("dump_terms_consistent", not bad_terms, len(bad_terms), f"levels {bad_terms}" if bad_terms else ""))
    out.append(_check("dump_total_matches_history", not bad_total, len(bad_total), f"levels {bad_total}" if bad_total else ""))
    out.append(_check("mark_count_matches_history", not bad_count, len(bad_count), f"levels {bad_count}" if bad_count else ""))
    out.append(_check("bulk_criterion", not bad_bulk, len(bad_bulk), f"levels {bad_bulk}" if bad_bulk else f"theta={theta}"))
    out.append(_check("marking_minimal", not bad_min, len(bad_min), f"levels {bad_min}" if bad_min else ""))

    mesh_dir = run_dir / "meshes"
    if not mesh_dir.is_dir():
        out.append(_skip("mesh_conforming", "no mesh dumps"))
        return out
    meshes = [read_mesh(mesh_dir / f"level_{r.level:03d}.mesh") for r in records]
    out.append(_check("mesh_conforming", all(m.is_conforming() for m in meshes)))
    growth = all(b.n_triangles > a.n_triangles for a, b in zip(meshes, meshes[1:]))
    out.append(_check("card_T_increasing", growth and all(m.n_triangles == r.card_T for m, r in zip(meshes, records))))
    nested, refined = True, True
    for l in range(len(meshes) - 1):
        par = nested_parents(meshes[l + 1], meshes[l])
        if par is None:
            nested = False
            continue
        try:
            flags = read_indicator_csv(run_dir / "indicators" / f"level_{l:03d}.csv")[2]
        except ValueError:
            continue  # already reported as an inconsistent dump
        marked = np.flatnonzero(flags)
        # a marked triangle must not reappear: all its children are strictly smaller
        child_area = meshes[l + 1].areas
        kept = np.isin(par, marked) & np.isclose(child_area, meshes[l].areas[par], rtol=1e-12)
        if kept.any():
            refined = False
    out.append(_check("meshes_nested", nested))
    out.append(_check("marked_elements_refined", refined))
    return out


# ----------------------------------------------------------------------
# checks on in-memory histories
# ----------------------------------------------------------------------
def audit_history(hist: AfemHistory, exact_values: Sequence[float] | None = None, gap_levels: tuple = (3, None)) -> list[CheckResult]:
    """Exact invariants at every level plus the diagnostic properties when available."""
    out = []
    levels = hist.levels
    if not levels:
        return [_skip("history", "no levels")]

    energy = max(d.energy_residual for d in levels)
    ortho = max(d.ortho_residual for d in levels)
    out.append(_check("energy_identity", energy <= 1e-8, energy, "max rel |sigma|_a^2 - lambda"))
    out.append(_check("l2_orthonormality", ortho <= 1e-10, ortho, "max |U^T M U - I|"))

    meshes = [d.mesh for d in levels]
    out.append(_check("mesh_conforming", all(m.is_conforming() for m in meshes)))
    nested = True
    refined = True
    for l in range(len(meshes) - 1):
        try:
            ancestor_map(meshes[l + 1], meshes[l])
        except ValueError:
            nested = False
            continue
        keys = set(meshes[l + 1].keys)
        base_keys = meshes[l].keys
        if any(base_keys[t] in keys for t in levels[l].marked):
            refined = False
    out.append(_check("meshes_nested", nested))
    out.append(_check("marked_elements_refined", refined))
    bulk = all(
        d.marked.size == 0 or d.field.per_element[d.marked].sum() >= hist.config.theta * d.field.total * (1 - 1e-12)
        for d in levels
    )
    out.append(_check("bulk_criterion", bulk))

    if not hist.has_diagnostics:
        for name in ("estimator_comparison", "eigenvalue_gap_ratio", "contraction", "efficiency", "reliability", "quasi_orthogonality"):
            out.append(_skip(name, "diagnostics disabled"))
        return out
    out.extend(diagnostic_checks(hist, exact_values, gap_levels))
    return out


def diagnostic_checks(hist: AfemHistory, exact_values, gap_levels=(3, None)) -> list[CheckResult]:
    out = []
    levels = hist.levels
    diags = [d.diagnostics for d in levels]
    exact_values = list(exact_values if exact_values is not None else [p.lam for p in hist.config.exact])

    worst_lo, worst_hi = 0.0, 0.0
    ok = True
    for d, dg in zip(levels, diags):
        cmp = verify.estimator_comparison(d.field.per_element, dg.mu_elem, exact_values, d.cluster.values)
        ok &= cmp["lower_ok"] and cmp["upper_ok"]
        worst_lo = max(worst_lo, cmp["lower_max"])
        worst_hi = max(worst_hi, cmp["upper_max"])
    out.append(_check("estimator_comparison", ok, max(worst_lo, worst_hi), f"max lhs/rhs lower {worst_lo:.3g}, upper {worst_hi:.3g}"))

    lo, hi = gap_levels
    sel = slice(lo, hi)
    eig = np.array([dg.eig_error for dg in diags])[sel]
    dl = np.array([dg.delta for dg in diags])[sel]
    if eig.size >= 2:
        # the error is bounded by C delta^2 from above only; levels where the
        # discrete values cross the exact ones give tiny ratios
        gap = verify.eigenvalue_gap_check(eig, dl)
        r = gap["ratios"][np.isfinite(gap["ratios"])]
        top = float(r.max() / np.median(r))
        out.append(_check("eigenvalue_gap_ratio", bool(top < 50), top, f"max/median of eig_error/delta^2; max/min {gap['spread']:.3g}"))
    else:
        out.append(_skip("eigenvalue_gap_ratio", "too few levels"))

    mu2, d2 = hist.column("mu2"), hist.column("d2")
    if mu2.size >= 4:
        best = None
        for beta in BETAS:
            r = verify.contraction_trace(mu2, d2, beta)[2:]
            if best is None or r.max() < best[1]:
                best = (beta, r.max())
        out.append(_check("contraction", best[1] < 1.0, best[1], f"best beta={best[0]}, max ratio for l>=2"))
    else:
        out.append(_skip("contraction", "too few levels"))

    if mu2.size >= 5:
        eff = np.sqrt(mu2 / d2)
        rel = d2 / mu2
        for name, seq in (("efficiency", eff), ("reliability", rel)):
            med = np.median(seq)
            spread = float(max(seq.max() / med, med / seq.min()))
            out.append(_check(name, spread <= 10.0, spread, f"median {med:.3g}"))
    else:
        out.append(_skip("efficiency", "needs 5 levels"))
        out.append(_skip("reliability", "needs 5 levels"))

    systems = [d.system for d in levels]
    if len(levels) >= 3 and all(s is not None for s in systems):
        qo = verify.quasi_orthogonality_trace(systems, diags)
        m = np.abs(qo["multiplier"])
        half = max(1, m.size // 2)
        early, late = float(m[:half].max()), float(m[half:].max()) if m.size > 1 else 0.0
        out.append(_check("quasi_orthogonality", late <= 2.0 * early, max(early, late),
                          f"fitted multiplier, early {early:.3g} late {late:.3g}"))
    else:
        out.append(_skip("quasi_orthogonality", "needs 3 levels with systems"))
    eps = max(dg.epsilon for dg in diags[1:]) if len(diags) > 1 else diags[0].epsilon
    out.append(CheckResult("basis_threshold_eps", "pass", eps, "logged only"))
    return out
