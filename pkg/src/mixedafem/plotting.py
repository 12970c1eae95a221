"""Figures for run reports (written to files, never shown)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402

from .mesh import Mesh  # noqa: E402


def convergence_plot(records, path, exact: Sequence[float] | None = None, title: str = "") -> None:
    """Log-log plot of eta^2 (and eigenvalue errors, if ``exact`` is given) versus dofs."""
    dofs = np.array([r.n_dofs for r in records], float)
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    ax.loglog(dofs, [r.eta2 for r in records], "o-", ms=3, label=r"$\sum_j \eta_j^2$")
    if exact is not None:
        lam = np.array([r.lambdas for r in records])
        err = np.abs(lam - np.asarray(exact)[None, :]).max(axis=1)
        ax.loglog(dofs, err, "s-", ms=3, label="eigenvalue error")
    if records and records[0].d2 is not None:
        ax.loglog(dofs, [r.d2 for r in records], "^-", ms=3, label=r"$\sum_j d^2$")
        ax.loglog(dofs, [r.mu2 for r in records], "v-", ms=3, label=r"$\sum_j \mu^2$")
    # reference slope -1
    if len(dofs) > 1:
        y0 = records[0].eta2
        ax.loglog(dofs, y0 * dofs[0] / dofs, "k:", lw=0.8, label=r"$N^{-1}$")
    ax.set_xlabel("degrees of freedom")
    ax.grid(True, which="both", lw=0.3)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def mesh_plot(mesh: Mesh, path, marked=None, title: str = "") -> None:
    """Triangulation with marked elements shaded."""
    polys = mesh.vertices[mesh.triangles]
    colors = np.full(mesh.n_triangles, "white", dtype=object)
    if marked is not None and len(marked):
        colors[np.asarray(marked, dtype=int)] = "tab:orange"
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.add_collection(PolyCollection(polys, facecolors=list(colors), edgecolors="k", linewidths=0.2))
    ax.set_xlim(mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max())
    ax.set_ylim(mesh.vertices[:, 1].min(), mesh.vertices[:, 1].max())
    ax.set_aspect("equal")
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def rate_plot(x, columns: dict, path, xlabel: str = "dofs") -> None:
    """Generic log-log plot of named columns against ``x``."""
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    for name, y in columns.items():
        y = np.asarray(y, float)
        ok = y > 0
        ax.loglog(np.asarray(x)[ok], y[ok], "o-", ms=3, label=name)
    ax.set_xlabel(xlabel)
    ax.grid(True, which="both", lw=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
