"""
Conforming triangulations with newest-vertex bisection.

Triangles are stored *apex first*: for a row ``(a, b, c)`` the refinement
edge is ``(b, c)``, i.e. the edge opposite local vertex 0, and ``a`` is the
newest vertex.  Local edge ``i`` always denotes the edge opposite local
vertex ``i``, traversed from vertex ``i+1`` to vertex ``i+2`` (mod 3).  All
triangles are kept counter-clockwise.

Every triangle carries the key ``(root, path)`` of its position in the
binary bisection forest rooted at the initial mesh.  This makes the overlay
of two refinements an exact forest union.

Examples
--------
>>> m = unit_square()
>>> fine = refine(m, [0])
>>> fine.n_triangles
4
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class MeshError(ValueError):
    """Invalid triangulation input."""


@dataclass(frozen=True)
class EdgeTopology:
    """Global edges of a mesh.

    Edges are oriented from the lower to the higher vertex index.
    ``edge_sign[t, i]`` is +1 when local edge ``i`` of triangle ``t`` is
    traversed in the global direction and -1 otherwise.
    """

    edges: np.ndarray  # (E, 2), lo < hi
    edge_of_triangle: np.ndarray  # (T, 3)
    edge_sign: np.ndarray  # (T, 3)
    triangles_of_edge: np.ndarray  # (E, 2), -1 for boundary
    local_index: np.ndarray  # (E, 2) local edge number inside each triangle
    tangent: np.ndarray  # (E, 2)
    length: np.ndarray  # (E,)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def boundary(self) -> np.ndarray:
        return self.triangles_of_edge[:, 1] < 0


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable conforming triangulation.

    Parameters
    ----------
    vertices : (V, 2) float array
    triangles : (T, 3) int array, apex first (refinement edge = local edge 0)
    generation : (T,) int array of bisection depths
    parent : (T,) int array, index of the containing triangle in the mesh
        this one was refined from (-1 for an initial mesh)
    root : (T,) int array, index of the initial triangle containing each one
    path : tuple of str, bisection path below ``root`` ('0' / '1' per step)
    initial : the initial mesh of the refinement forest (``None`` if this
        mesh is itself initial)
    """

    vertices: np.ndarray
    triangles: np.ndarray
    generation: np.ndarray
    parent: np.ndarray
    root: np.ndarray
    path: tuple
    initial: "Mesh | None" = field(default=None, repr=False)

    # ------------------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def __len__(self) -> int:
        return self.n_triangles

    @property
    def refinement_edge(self) -> np.ndarray:
        """Local refinement edge index per triangle (always 0 by storage)."""
        return np.zeros(self.n_triangles, dtype=int)

    @property
    def base(self) -> "Mesh":
        """The initial mesh of the refinement forest."""
        return self if self.initial is None else self.initial

    @property
    def keys(self) -> list[tuple[int, str]]:
        return list(zip(self.root.tolist(), self.path))

    @cached_property
    def jacobians(self) -> np.ndarray:
        """(T, 2, 2) affine maps ``x = p0 + J @ xhat`` (columns are edges)."""
        p = self.vertices[self.triangles]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)

    @cached_property
    def dets(self) -> np.ndarray:
        J = self.jacobians
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    @property
    def areas(self) -> np.ndarray:
        return 0.5 * self.dets

    @cached_property
    def diameters(self) -> np.ndarray:
        """Longest edge of each triangle (h_T)."""
        p = self.vertices[self.triangles]
        d = np.stack(
            [
                np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
                np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
                np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
            ],
            axis=1,
        )
        return d.max(axis=1)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def topology(self) -> EdgeTopology:
        tri = self.triangles
        T = len(tri)
        start = tri[:, [1, 2, 0]].ravel()
        end = tri[:, [2, 0, 1]].ravel()
        lo = np.minimum(start, end)
        hi = np.maximum(start, end)
        pairs = np.stack([lo, hi], axis=1)
        edges, inverse, counts = np.unique(
            pairs, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.ravel()
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two triangles")
        edge_of_triangle = inverse.reshape(T, 3)
        edge_sign = np.where(start < end, 1, -1).reshape(T, 3)

        E = len(edges)
        tri_of_edge = -np.ones((E, 2), dtype=int)
        local = -np.ones((E, 2), dtype=int)
        flat_t = np.repeat(np.arange(T), 3)
        flat_i = np.tile(np.arange(3), T)
        order = np.argsort(inverse, kind="stable")
        sorted_edges = inverse[order]
        first = np.r_[True, sorted_edges[1:] != sorted_edges[:-1]]
        slot = np.where(first, 0, 1)
        tri_of_edge[sorted_edges, slot] = flat_t[order]
        local[sorted_edges, slot] = flat_i[order]

        vec = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
        length = np.linalg.norm(vec, axis=1)
        return EdgeTopology(
            edges=edges,
            edge_of_triangle=edge_of_triangle,
            edge_sign=edge_sign,
            triangles_of_edge=tri_of_edge,
            local_index=local,
            tangent=vec / length[:, None],
            length=length,
        )

    # ------------------------------------------------------------------
    def validate(self) -> None:
        """Check orientation and edge incidence; raise :class:`MeshError`."""
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be an (T, 3) array")
        if self.triangles.min(initial=0) < 0 or self.triangles.max(initial=0) >= self.n_vertices:
            raise MeshError("triangle references a missing vertex")
        scale = max(np.ptp(self.vertices, axis=0).max(), 1e-300) ** 2
        if np.any(np.abs(self.dets) <= 1e-14 * scale):
            raise MeshError("degenerate triangle")
        if np.any(self.dets < 0):
            raise MeshError("triangle with negative signed area")
        self.topology  # raises on edges with three or more triangles

    def is_conforming(self) -> bool:
        """True if no vertex lies in the interior of a boundary edge.

        Interior edges shared by two triangles are always conforming; a hanging
        node shows up as a vertex sitting on an edge seen by one triangle only.
        """
        topo = self.topology
        bnd = np.flatnonzero(topo.boundary)
        used = np.unique(self.triangles)
        P = self.vertices[used]
        for chunk in np.array_split(bnd, max(1, len(bnd) // 256)):
            a = self.vertices[topo.edges[chunk, 0]]
            b = self.vertices[topo.edges[chunk, 1]]
            ab = b - a
            L2 = np.einsum("ij,ij->i", ab, ab)
            ap = P[None, :, :] - a[:, None, :]
            s = np.einsum("ekj,ej->ek", ap, ab) / L2[:, None]
            cross = ap[..., 0] * ab[:, None, 1] - ap[..., 1] * ab[:, None, 0]
            tol = 1e-12 * np.sqrt(L2)[:, None]
            inside = (s > 1e-12) & (s < 1 - 1e-12) & (np.abs(cross) / np.sqrt(L2)[:, None] < tol)
            if inside.any():
                return False
        return True

    def is_compatible(self) -> bool:
        """True if every interior refinement edge is also the refinement edge
        of the neighbouring triangle (matching pairs)."""
        topo = self.topology
        ref = topo.edge_of_triangle[:, 0]
        nb = topo.triangles_of_edge[ref]
        other = np.where(nb[:, 0] == np.arange(self.n_triangles), nb[:, 1], nb[:, 0])
        interior = other >= 0
        return bool(np.all(topo.edge_of_triangle[other[interior], 0] == ref[interior]))


# ----------------------------------------------------------------------
# construction
# ----------------------------------------------------------------------
def _orient_ccw(vertices: np.ndarray, tri: np.ndarray) -> np.ndarray:
    p = vertices[tri]
    det = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    if np.any(det < 0):
        raise MeshError("triangle with negative signed area")
    return tri


def _longest_edge_rotation(vertices: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Pick a refinement edge per triangle: longest edge, ties resolved so
    that neighbours agree whenever possible."""
    p = vertices[tri]
    L = np.stack(
        [
            np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
            np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
            np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
        ],
        axis=1,
    )
    longest = L >= L.max(axis=1, keepdims=True) * (1 - 1e-12)
    choice = np.argmax(longest, axis=1)

    # repair: for triangles with tied longest edges prefer an edge that a
    # neighbour has chosen as well
    def key(t, i):
        a, b = tri[t, (i + 1) % 3], tri[t, (i + 2) % 3]
        return (min(a, b), max(a, b))

    tied = np.flatnonzero(longest.sum(axis=1) > 1)
    if tied.size:
        for _ in range(3):
            chosen = {}
            for t in range(len(tri)):
                chosen.setdefault(key(t, choice[t]), []).append(t)
            changed = False
            for t in tied:
                if len(chosen[key(t, choice[t])]) == 2:
                    continue
                for i in np.flatnonzero(longest[t]):
                    k = key(t, i)
                    if k in chosen and len(chosen[k]) == 1 and chosen[k][0] != t:
                        chosen[key(t, choice[t])].remove(t)
                        choice[t] = i
                        chosen[k].append(t)
                        changed = True
                        break
            if not changed:
                break
    return choice


def _rotate(tri: np.ndarray, ref: np.ndarray) -> np.ndarray:
    idx = (np.asarray(ref)[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(tri, idx, axis=1)


def from_arrays(
    vertices: Sequence,
    triangles: Sequence,
    refinement_edge: Sequence | None = None,
    generation: Sequence | None = None,
) -> Mesh:
    """Build and validate an initial mesh.

    Without ``refinement_edge`` the longest edge of every triangle is used.

    Raises
    ------
    MeshError
        Inverted or degenerate triangles, or edges with three incident
        triangles.
    """
    v = np.asarray(vertices, dtype=float).reshape(-1, 2)
    t = np.asarray(triangles, dtype=int).reshape(-1, 3)
    _orient_ccw(v, t)
    if refinement_edge is None:
        ref = _longest_edge_rotation(v, t)
    else:
        ref = np.asarray(refinement_edge, dtype=int)
        if np.any((ref < 0) | (ref > 2)):
            raise MeshError("refinement edge index must be 0, 1 or 2")
    t = _rotate(t, ref)
    T = len(t)
    gen = np.zeros(T, int) if generation is None else np.asarray(generation, int)
    mesh = Mesh(
        vertices=v,
        triangles=t,
        generation=gen,
        parent=-np.ones(T, int),
        root=np.arange(T),
        path=("",) * T,
    )
    mesh.validate()
    if not mesh.is_conforming():
        raise MeshError("hanging node in input triangulation")
    return mesh


def unit_square() -> Mesh:
    """(0,1)^2 split along the diagonal from (0,0) to (1,1)."""
    return from_arrays([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]])


def lshape() -> Mesh:
    """(-1,1)^2 minus [0,1]x[-1,0]: three unit squares, two triangles each."""
    v = [[-1, -1], [0, -1], [-1, 0], [0, 0], [1, 0], [-1, 1], [0, 1], [1, 1]]
    t = [[0, 1, 3], [0, 3, 2], [2, 3, 6], [2, 6, 5], [3, 4, 7], [3, 7, 6]]
    return from_arrays(v, t)


def equilateral() -> Mesh:
    return from_arrays([[0, 0], [1, 0], [0.5, math.sqrt(3) / 2]], [[0, 1, 2]])


DOMAINS = {"square": unit_square, "lshape": lshape}


def load_initial_mesh(spec) -> Mesh:
    """Initial mesh from a domain name, a mesh file, or ``(vertices, triangles)``."""
    if isinstance(spec, Mesh):
        return spec
    if isinstance(spec, str) and spec in DOMAINS:
        return DOMAINS[spec]()
    if isinstance(spec, (str, Path)):
        return read_mesh(spec)
    return from_arrays(*spec)


# ----------------------------------------------------------------------
# newest vertex bisection
# ----------------------------------------------------------------------
def _closure(mesh: Mesh, marked: np.ndarray) -> np.ndarray:
    """Edges to bisect so that the refinement is conforming."""
    topo = mesh.topology
    ref = topo.edge_of_triangle[:, 0]
    tri_of_edge = topo.triangles_of_edge
    flagged = np.zeros(topo.n_edges, dtype=bool)
    stack = list(ref[marked])
    while stack:
        e = stack.pop()
        if flagged[e]:
            continue
        flagged[e] = True
        for t in tri_of_edge[e]:
            if t >= 0 and not flagged[ref[t]]:
                stack.append(ref[t])
    return flagged


def refine(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """Smallest conforming NVB refinement in which no marked triangle survives.

    Each marked triangle is bisected at least once; closure bisects
    neighbours whose refinement edge is not the shared one.  A triangle can
    end up with 2, 3 or 4 children.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked, dtype=int))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_triangles:
        raise IndexError("marked triangle id out of range")
    topo = mesh.topology
    flagged = _closure(mesh, marked)
    eot = topo.edge_of_triangle

    verts = [row for row in mesh.vertices]
    midpoint: dict[int, int] = {}

    def mid(e: int) -> int:
        m = midpoint.get(e)
        if m is None:
            a, b = topo.edges[e]
            m = len(verts)
            verts.append(0.5 * (mesh.vertices[a] + mesh.vertices[b]))
            midpoint[e] = m
        return m

    tris, gens, parents, roots, paths = [], [], [], [], []
    old_gen = mesh.generation
    old_root = mesh.root
    for t, (a, b, c) in enumerate(mesh.triangles.tolist()):
        g, r, p = int(old_gen[t]), int(old_root[t]), mesh.path[t]
        e0, e1, e2 = eot[t]
        if not flagged[e0]:
            tris.append((a, b, c))
            gens.append(g)
            parents.append(t)
            roots.append(r)
            paths.append(p)
            continue
        m = mid(e0)
        # first child (m, a, b) has refinement edge ab = local edge 2
        if flagged[e2]:
            m1 = mid(e2)
            kids = [((m1, m, a), "00"), ((m1, b, m), "01")]
        else:
            kids = [((m, a, b), "0")]
        # second child (m, c, a) has refinement edge ca = local edge 1
        if flagged[e1]:
            m2 = mid(e1)
            kids += [((m2, m, c), "10"), ((m2, a, m), "11")]
        else:
            kids += [((m, c, a), "1")]
        for verts3, bits in kids:
            tris.append(verts3)
            gens.append(g + len(bits))
            parents.append(t)
            roots.append(r)
            paths.append(p + bits)

    return Mesh(
        vertices=np.asarray(verts, dtype=float),
        triangles=np.asarray(tris, dtype=int),
        generation=np.asarray(gens, dtype=int),
        parent=np.asarray(parents, dtype=int),
        root=np.asarray(roots, dtype=int),
        path=tuple(paths),
        initial=mesh.base,
    )


def uniform_refine(mesh: Mesh, times: int = 1) -> Mesh:
    """Bisect every triangle twice per step (each triangle -> 4, h halves)."""
    for _ in range(2 * times):
        mesh = refine(mesh, np.arange(mesh.n_triangles))
    return mesh


def ancestor_map(fine: Mesh, coarse: Mesh) -> np.ndarray:
    """Index of the coarse triangle containing each fine triangle.

    Both meshes must come from the same bisection forest and ``fine`` must
    refine ``coarse``.
    """
    if fine.base is not coarse.base and not _same_base(fine.base, coarse.base):
        raise MeshError("meshes do not share an initial mesh")
    lookup = {k: i for i, k in enumerate(coarse.keys)}
    out = np.empty(fine.n_triangles, dtype=int)
    for i, (r, p) in enumerate(fine.keys):
        for n in range(len(p), -1, -1):
            j = lookup.get((r, p[:n]))
            if j is not None:
                out[i] = j
                break
        else:
            raise MeshError("fine mesh does not refine coarse mesh")
    return out


def _same_base(a: Mesh, b: Mesh) -> bool:
    return (
        a.vertices.shape == b.vertices.shape
        and a.triangles.shape == b.triangles.shape
        and np.array_equal(a.vertices, b.vertices)
        and np.array_equal(a.triangles, b.triangles)
    )


def materialize(initial: Mesh, leaves: set) -> Mesh:
    """Build the mesh whose triangles are the given forest leaves.

    ``leaves`` is a set of ``(root, path)`` keys forming a full partition of
    the initial triangles.
    """
    prefixes = set()
    for r, p in leaves:
        for n in range(len(p)):
            prefixes.add((r, p[:n]))

    verts = [row for row in initial.vertices]
    midpoint: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        k = (a, b) if a < b else (b, a)
        m = midpoint.get(k)
        if m is None:
            m = len(verts)
            verts.append(0.5 * (verts[a] + verts[b]))
            midpoint[k] = m
        return m

    tris, gens, roots, paths = [], [], [], []
    for r, (a, b, c) in enumerate(initial.triangles.tolist()):
        g0 = int(initial.generation[r])
        stack = [((a, b, c), "")]
        while stack:
            (x, y, z), p = stack.pop()
            if (r, p) in leaves:
                tris.append((x, y, z))
                gens.append(g0 + len(p))
                roots.append(r)
                paths.append(p)
            elif (r, p) in prefixes:
                m = mid(y, z)
                stack.append(((m, z, x), p + "1"))
                stack.append(((m, x, y), p + "0"))
            else:
                raise MeshError("leaf set is not a partition of the forest")
    T = len(tris)
    return Mesh(
        vertices=np.asarray(verts, dtype=float),
        triangles=np.asarray(tris, dtype=int),
        generation=np.asarray(gens, dtype=int),
        parent=-np.ones(T, dtype=int),
        root=np.asarray(roots, dtype=int),
        path=tuple(paths),
        initial=initial,
    )


def overlay(t1: Mesh, t2: Mesh) -> Mesh:
    """Smallest common refinement of two refinements of one initial mesh."""
    if t1.base is not t2.base and not _same_base(t1.base, t2.base):
        raise MeshError("overlay requires a common initial mesh")
    keys = set(t1.keys) | set(t2.keys)
    inner = set()
    for r, p in keys:
        for n in range(len(p)):
            inner.add((r, p[:n]))
    return materialize(t1.base, keys - inner)


# ----------------------------------------------------------------------
# geometry helpers
# ----------------------------------------------------------------------
def triangle_angles(mesh: Mesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles]
    out = np.empty((mesh.n_triangles, 3))
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        v = p[:, (i + 2) % 3] - p[:, i]
        cos = np.einsum("ij,ij->i", u, v) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        )
        out[:, i] = np.arccos(np.clip(cos, -1.0, 1.0))
    return out


def min_angle(mesh: Mesh) -> float:
    """Smallest interior angle (radians) over all triangles."""
    return float(triangle_angles(mesh).min())


def point_in_triangle(mesh: Mesh, t: int, pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Whether points lie in the closed triangle ``t``."""
    J = mesh.jacobians[t]
    lam = np.linalg.solve(J, (np.atleast_2d(pts) - mesh.vertices[mesh.triangles[t, 0]]).T).T
    l0 = 1 - lam.sum(axis=1)
    return (lam >= -tol).all(axis=1) & (l0 >= -tol)


# ----------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------
def write_mesh(mesh: Mesh, path) -> None:
    """Plain text: ``V T``, then ``x y`` rows, then ``v0 v1 v2 refedge generation``."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [
        f"{a} {b} {c} 0 {g}"
        for (a, b, c), g in zip(mesh.triangles.tolist(), mesh.generation.tolist())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """Read the plain text format written by :func:`write_mesh`."""
    tokens = Path(path).read_text().split("\n")
    rows = [ln.split() for ln in tokens if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        V, T = int(rows[0][0]), int(rows[0][1])
        verts = np.array([[float(x) for x in r[:2]] for r in rows[1 : 1 + V]])
        body = np.array([[int(x) for x in r[:5]] for r in rows[1 + V : 1 + V + T]])
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh file {path}") from exc
    if len(verts) != V or len(body) != T:
        raise MeshError(f"malformed mesh file {path}")
    return from_arrays(verts, body[:, :3], refinement_edge=body[:, 3], generation=body[:, 4])


def write_vtk(mesh: Mesh, path, cell_data: dict | None = None) -> None:
    """Legacy ASCII VTK unstructured grid with triangle cells."""
    V, T = mesh.n_vertices, mesh.n_triangles
    out = ["# vtk DataFile Version 3.0", "mixedafem mesh", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {V} double")
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    out.append(f"CELLS {T} {4 * T}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    out.append(f"CELL_TYPES {T}")
    out += ["5"] * T
    data = {"generation": mesh.generation}
    data.update(cell_data or {})
    out.append(f"CELL_DATA {T}")
    for name, values in data.items():
        out.append(f"SCALARS {name} double 1")
        out.append("LOOKUP_TABLE default")
        out += [repr(float(x)) for x in np.asarray(values).ravel()]
    Path(path).write_text("\n".join(out) + "\n")
