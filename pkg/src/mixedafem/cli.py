"""Command line front end.

Subcommands::

    mixedafem run     --domain lshape --theta 0.5 --cluster 1:1 --degree rt0
    mixedafem rates   out/history.csv --exact 9.6397158
    mixedafem verify  --domain square --cluster 2:3 --diagnostics
    mixedafem verify  --run-dir out/

Exit codes: 0 ok, 2 configuration error, 3 solver failure, 4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import AfemConfig, LevelData, LevelRecord, read_history, run_afem
from .audit import audit_history, audit_run_dir, format_report, write_report
from .eigsolve import ClusterSpec
from .estimator import write_indicator_csv
from .fespace import FeDegree
from .mesh import DOMAINS, MeshError, load_initial_mesh, uniform_refine, write_mesh, write_vtk
from .reference import LSHAPE_LAMBDA1
from .verify import fit_rate, square_cluster

log = logging.getLogger("mixedafem")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
OUTPUT_ENV = "MIXEDAFEM_OUTPUT"

# manifest keys accepted in --config files, with their parsers
MANIFEST_KEYS = {
    "domain": str,
    "mesh_file": str,
    "theta": float,
    "cluster": str,
    "degree": str,
    "max_dofs": int,
    "max_levels": int,
    "eta_tol": float,
    "diagnostics": lambda s: s.strip().lower() in ("1", "true", "yes", "on"),
    "beta": float,
    "pre_refine": int,
    "guard": float,
    "seed": int,
}


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in MANIFEST_KEYS:
            raise ConfigError(f"{path}:{n}: unknown or malformed entry {line!r}")
        try:
            out[key] = MANIFEST_KEYS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from exc
    return out


def _add_manifest_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override its entries")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--domain", choices=sorted(DOMAINS))
    src.add_argument("--mesh-file", help="initial mesh in the plain text format")
    p.add_argument("--theta", type=float, help="bulk parameter in (0, 1] (default 0.5)")
    p.add_argument("--cluster", help="eigenvalue indices a:b, 1-based inclusive (default 1:1)")
    p.add_argument("--degree", help="rt0, rt1, rt2, rt3 or bdm1 (default rt0)")
    p.add_argument("--max-dofs", type=int, help="stop before a mesh with more dofs (default 200000)")
    p.add_argument("--max-levels", type=int, help="maximal number of refinements (default 50)")
    p.add_argument("--eta-tol", type=float, help="stop once the total estimator is below this")
    p.add_argument("--diagnostics", action="store_true", default=None, help="compute exact-error quantities (square only)")
    p.add_argument("--beta", type=float, help="weight of d^2 in the contraction quantity (default 1)")
    p.add_argument("--pre-refine", type=int, help="uniform refinements of the initial mesh")
    p.add_argument("--guard", type=float, help="minimal relative gap to neighbouring eigenvalues")
    p.add_argument("--seed", type=int, help="recorded in the manifest")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<name> or ./runs/<name>)")
    p.add_argument("--no-plots", action="store_true", help="skip figures")
    p.add_argument("--vtk", action="store_true", help="also write VTK meshes")


DEFAULTS = dict(
    domain=None, mesh_file=None, theta=0.5, cluster="1:1", degree="rt0", max_dofs=200_000,
    max_levels=50, eta_tol=0.0, diagnostics=False, beta=1.0, pre_refine=0, guard=1e-3, seed=0,
)


# verify checks asymptotic properties: start from a finer mesh, smaller runs
VERIFY_DEFAULTS = dict(DEFAULTS, pre_refine=2, max_dofs=20_000, diagnostics=True)


def build_manifest(args, defaults: dict = DEFAULTS) -> dict:
    m = dict(defaults)
    explicit = set()
    if args.config:
        try:
            cfg = read_config(args.config)
        except OSError as exc:
            raise ConfigError(str(exc)) from exc
        m.update(cfg)
        explicit |= set(cfg)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            m[key] = val
            explicit.add(key)
    if getattr(args, "no_diagnostics", False):
        m["diagnostics"] = False
        explicit.add("diagnostics")
    if args.domain is not None:
        m["mesh_file"] = None
    if args.mesh_file is not None:
        m["domain"] = None
    if m["domain"] is None and m["mesh_file"] is None:
        m["domain"] = "square"
    if "diagnostics" not in explicit and m["domain"] != "square":
        m["diagnostics"] = False
    if m["mesh_file"] is not None:
        if not Path(m["mesh_file"]).is_file():
            raise ConfigError(f"mesh file {m['mesh_file']} does not exist")
        m["mesh_file"] = str(Path(m["mesh_file"]).resolve())
    return m


def manifest_hash(m: dict) -> str:
    return hashlib.sha256(json.dumps(m, sort_keys=True).encode()).hexdigest()


def config_from_manifest(m: dict) -> tuple[AfemConfig, object]:
    try:
        cluster = ClusterSpec.parse(m["cluster"], guard=m["guard"])
        degree = FeDegree.parse(m["degree"])
        exact = ()
        if m["diagnostics"]:
            if m["domain"] != "square":
                raise ConfigError("diagnostics need analytic eigenpairs (domain square)")
            exact = tuple(square_cluster(cluster.indices))
        cfg = AfemConfig(
            theta=m["theta"], cluster=cluster, degree=degree, max_levels=m["max_levels"],
            max_dofs=m["max_dofs"], eta_tol=m["eta_tol"], diagnostics=m["diagnostics"],
            exact=exact, beta=m["beta"], keep_systems=m["diagnostics"],
        )
        if m["pre_refine"] < 0:
            raise ConfigError("pre_refine must be nonnegative")
        mesh = load_initial_mesh(m["domain"] or m["mesh_file"])
        mesh = uniform_refine(mesh, m["pre_refine"])
    except (ValueError, MeshError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, mesh


def exact_values(m: dict) -> list[float] | None:
    spec = ClusterSpec.parse(m["cluster"])
    if m["domain"] == "square":
        return [p.lam for p in square_cluster(spec.indices)]
    if m["domain"] == "lshape" and spec.indices == [1]:
        return [LSHAPE_LAMBDA1]
    return None


def output_dir(m: dict, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    name = f"{m['domain'] or Path(m['mesh_file']).stem}_{m['degree']}_J{m['cluster'].replace(':', '-')}_{manifest_hash(m)[:8]}"
    root = os.environ.get(OUTPUT_ENV)
    return Path(root) / name if root else Path("runs") / name


def _error_record(kind: str, message: str, code: int, out: Path | None = None) -> int:
    rec = {"error": kind, "message": message, "exit_code": code}
    print(json.dumps(rec), file=sys.stderr)
    if out is not None and out.is_dir():
        (out / "error.json").write_text(json.dumps(rec, indent=2) + "\n")
    return code


def execute(m: dict, out: Path, plots: bool = True, vtk: bool = False):
    """Run the loop of a manifest and write all artifacts to ``out``."""
    cfg, mesh = config_from_manifest(m)
    out.mkdir(parents=True, exist_ok=True)
    (out / "indicators").mkdir(exist_ok=True)
    (out / "meshes").mkdir(exist_ok=True)

    def dump(rec: LevelRecord, data: LevelData) -> None:
        write_indicator_csv(data.field, out / "indicators" / f"level_{rec.level:03d}.csv", data.marked)
        write_mesh(data.mesh, out / "meshes" / f"level_{rec.level:03d}.mesh")
        if vtk:
            write_vtk(data.mesh, out / "meshes" / f"level_{rec.level:03d}.vtk",
                      {"eta2": data.field.per_element})

    hist = run_afem(cfg, mesh, on_level=dump)
    hist.to_csv(out / "history.csv")
    if hist.has_diagnostics:
        write_diagnostics_csv(hist, out / "diagnostics.csv")
    info = {
        "version": __version__,
        "manifest": m,
        "manifest_hash": manifest_hash(m),
        "status": hist.status,
        "message": hist.message,
        "levels": len(hist),
    }
    (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    if plots and hist.records:
        from .plotting import convergence_plot, mesh_plot

        convergence_plot(hist.records, out / "convergence.png", exact_values(m), title=f"{m['degree']} J={m['cluster']}")
        last = hist.levels[-1]
        mesh_plot(last.mesh, out / "mesh_final.png", last.marked, title=f"level {len(hist) - 1}")
    return hist


def write_diagnostics_csv(hist, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["level", "dofs", "h_max", "eig_error", "delta", "gap_ratio", "epsilon", "d2", "mu2"])
        for rec, data in zip(hist.records, hist.levels):
            dg = data.diagnostics
            ratio = dg.eig_error / dg.delta**2 if dg.delta > 0 else float("nan")
            wr.writerow([rec.level, rec.n_dofs, repr(dg.h_max), repr(dg.eig_error), repr(dg.delta),
                         repr(ratio), repr(dg.epsilon), repr(dg.d2), repr(dg.mu2)])


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_run(args) -> int:
    try:
        m = build_manifest(args)
        config_from_manifest(m)  # validate before touching the disk
    except ConfigError as exc:
        return _error_record("config", str(exc), EXIT_CONFIG)
    out = output_dir(m, args.out)
    try:
        hist = execute(m, out, plots=not args.no_plots, vtk=args.vtk)
    except ConfigError as exc:
        return _error_record("config", str(exc), EXIT_CONFIG, out)
    except (np.linalg.LinAlgError, RuntimeError) as exc:
        return _error_record("solver", str(exc), EXIT_SOLVER, out)
    print(f"{len(hist)} levels, status {hist.status}; output in {out}")
    if hist.status == "solver_failure":
        return _error_record("solver", hist.message, EXIT_SOLVER, out)
    return EXIT_OK


def _rate_columns(records, exact):
    n = len(records[0].lambdas)
    cols = {"eta2": np.array([r.eta2 for r in records])}
    if exact is not None:
        if len(exact) != n:
            raise ConfigError(f"--exact needs {n} values")
        lam = np.array([r.lambdas for r in records])
        for j in range(n):
            cols[f"err_lambda_{j + 1}"] = np.abs(lam[:, j] - exact[j])
    if records[0].d2 is not None:
        for c in ("d2", "mu2", "xi2"):
            cols[c] = np.array([getattr(r, c) for r in records])
        cols["delta"] = np.array([r.delta for r in records])
    return cols


def cmd_rates(args) -> int:
    exact = None
    if args.exact:
        try:
            exact = [float(x) for x in args.exact.split(",")]
        except ValueError:
            return _error_record("config", f"bad --exact {args.exact!r}", EXIT_CONFIG)
    rows = []
    for path in args.files:
        try:
            records = read_history(path)
            if len(records) < 3:
                raise ValueError(f"{path}: rates need at least three levels")
            sel = records[-args.trailing:] if args.trailing else records
            if len(sel) < 3:
                raise ValueError(f"{path}: trailing window has fewer than three levels")
            cols = _rate_columns(sel, exact)
        except (OSError, ValueError) as exc:
            return _error_record("config", str(exc), EXIT_CONFIG)
        dofs = np.array([r.n_dofs for r in sel], float)
        for name, y in cols.items():
            if args.columns and name not in args.columns:
                continue
            if np.any(y <= 0):
                rows.append([path, name, "nan", "nan", "nan", len(sel)])
                continue
            s, c, r2 = fit_rate(dofs, y)
            rows.append([path, name, f"{s:.6f}", f"{c:.6f}", f"{r2:.6f}", len(sel)])
        if args.plot:
            from .plotting import rate_plot

            rate_plot(dofs, cols, Path(args.plot).with_suffix("").as_posix() + f"_{Path(path).parent.name}.png"
                      if len(args.files) > 1 else args.plot)
    header = ["file", "column", "slope", "intercept", "r2", "levels"]
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.run_dir:
        run_dir = Path(args.run_dir)
        if not (run_dir / "history.csv").is_file():
            return _error_record("config", f"{run_dir} has no history.csv", EXIT_CONFIG)
        try:
            results = audit_run_dir(run_dir)
        except (OSError, ValueError, KeyError) as exc:
            return _error_record("verify", f"unreadable run directory: {exc}", EXIT_VERIFY)
        report = run_dir / "verify_report.csv"
    else:
        try:
            m = build_manifest(args, VERIFY_DEFAULTS)
            config_from_manifest(m)
        except ConfigError as exc:
            return _error_record("config", str(exc), EXIT_CONFIG)
        out = output_dir(m, args.out)
        try:
            hist = execute(m, out, plots=not args.no_plots, vtk=args.vtk)
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            return _error_record("solver", str(exc), EXIT_SOLVER, out)
        if hist.status == "solver_failure":
            return _error_record("solver", hist.message, EXIT_SOLVER, out)
        results = audit_history(hist, exact_values(m)) + audit_run_dir(out)
        report = out / "verify_report.csv"
    write_report(results, report)
    print(format_report(results))
    n_fail = sum(r.failed for r in results)
    n_skip = sum(r.status == "skipped" for r in results)
    print(f"{len(results) - n_fail - n_skip} passed, {n_fail} failed, {n_skip} skipped; report {report}")
    return EXIT_VERIFY if n_fail else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixedafem", description="Adaptive mixed FEM for Laplace eigenvalue clusters")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="adaptive solve/estimate/mark/refine loop")
    _add_manifest_args(r)
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("rates", help="least-squares rates of history columns against dofs")
    t.add_argument("files", nargs="+", help="history.csv files")
    t.add_argument("--exact", help="comma separated exact eigenvalues for error columns")
    t.add_argument("--trailing", type=int, default=0, help="only use the last N levels")
    t.add_argument("--columns", nargs="*", help="restrict to these columns")
    t.add_argument("--output", help="write the table here instead of stdout")
    t.add_argument("--plot", help="log-log figure of the fitted columns")
    t.set_defaults(func=cmd_rates)

    v = sub.add_parser("verify", help="property checks on a fresh run or on a run directory")
    _add_manifest_args(v)
    v.add_argument("--run-dir", help="audit the dumps of an existing run instead of running")
    v.add_argument("--no-diagnostics", action="store_true", help="skip the exact-error properties")
    v.description = (
        "Runs the adaptive loop and checks invariants and estimator properties. "
        "Defaults differ from 'run': diagnostics on (square), --pre-refine 2, --max-dofs 20000."
    )
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
