"""Conforming triangle meshes with newest-vertex bisection (NVB) refinement."""

import itertools
import logging
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

# Number of ancestor meshes a refined mesh keeps triangle maps for.
ANCESTRY_DEPTH = 8
GEOMETRY_TOL = 1e-12

# Children per bisection pattern, as rows (i, j, k, generation increment) into
# the stacked table [v0, v1, v2, m0, m1, m2]; the pattern code is
# f0 + 2*f1 + 4*f2 for the flagged local edges.
_CHILDREN = {
    0: ((0, 1, 2, 0),),
    1: ((3, 0, 1, 1), (3, 2, 0, 1)),
    3: ((3, 0, 1, 1), (4, 3, 2, 2), (4, 0, 3, 2)),
    5: ((5, 3, 0, 2), (5, 1, 3, 2), (3, 2, 0, 1)),
    7: ((5, 3, 0, 2), (5, 1, 3, 2), (4, 3, 2, 2), (4, 0, 3, 2)),
}

_UIDS = itertools.count(1)

MarkedSet = np.ndarray


class MeshError(ValueError):
    """Invalid mesh input, marked set or mesh file."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Mesh:
    """Immutable 2D triangulation.

    Triangles are stored counter-clockwise with the vertex opposite the
    refinement edge first, so local edge i (opposite local vertex i) of every
    triangle is (v[i+1], v[i+2]) and local edge 0 is the refinement edge.
    """

    def __init__(self, vertices, triangles, generation=None,
                 parent: Optional[np.ndarray] = None,
                 ancestry: Optional[Dict[int, np.ndarray]] = None,
                 domain_area: Optional[float] = None):
        self.vertices = _readonly(np.array(vertices, dtype=float).reshape(-1, 2))
        self.triangles = _readonly(np.array(triangles, dtype=np.int64).reshape(-1, 3))
        if generation is None:
            generation = np.zeros(len(self.triangles), dtype=np.int64)
        self.generation = _readonly(np.array(generation, dtype=np.int64))
        self.parent = None if parent is None else _readonly(np.asarray(parent, dtype=np.int64))
        self.ancestry: Dict[int, np.ndarray] = dict(ancestry or {})
        self.uid = next(_UIDS)
        self._domain_area = None if domain_area is None else float(domain_area)

    def __repr__(self) -> str:
        return f"Mesh(uid={self.uid}, vertices={self.n_vertices}, triangles={self.n_triangles})"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def coords(self) -> np.ndarray:
        """Vertex coordinates per triangle, shape (nT, 3, 2)."""
        return _readonly(self.vertices[self.triangles])

    @cached_property
    def areas(self) -> np.ndarray:
        """Signed areas; positive for counter-clockwise triangles."""
        x = self.coords
        d1 = x[:, 1] - x[:, 0]
        d2 = x[:, 2] - x[:, 0]
        return _readonly(0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]))

    @cached_property
    def centroids(self) -> np.ndarray:
        return _readonly(self.coords.mean(axis=1))

    @cached_property
    def local_edge_vectors(self) -> np.ndarray:
        """Tangent of local edge i, from v[i+1] to v[i+2], shape (nT, 3, 2)."""
        x = self.coords
        return _readonly(np.roll(x, -2, axis=1) - np.roll(x, -1, axis=1))

    @cached_property
    def local_edge_lengths(self) -> np.ndarray:
        return _readonly(np.linalg.norm(self.local_edge_vectors, axis=2))

    @cached_property
    def outward_normals(self) -> np.ndarray:
        """Unit outward normal of local edge i, shape (nT, 3, 2)."""
        t = self.local_edge_vectors
        n = np.stack([t[..., 1], -t[..., 0]], axis=-1)
        return _readonly(n / self.local_edge_lengths[..., None])

    @cached_property
    def _edge_data(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        tri = self.triangles
        n_tri = len(tri)
        if n_tri == 0:
            empty = np.zeros((0, 2), dtype=np.int64)
            return empty, np.zeros((0, 3), dtype=np.int64), empty.copy(), np.zeros(0, dtype=np.int64)
        local = np.concatenate([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]])
        local.sort(axis=1)
        edges, inverse = np.unique(local, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        element_edges = inverse.reshape(3, n_tri).T.copy()

        owners = np.tile(np.arange(n_tri), 3)
        order = np.lexsort((owners, inverse))
        counts = np.bincount(inverse, minlength=len(edges))
        starts = np.cumsum(counts) - counts
        edge_triangles = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_triangles[:, 0] = owners[order][starts]
        shared = counts >= 2
        edge_triangles[shared, 1] = owners[order][starts[shared] + 1]
        return (_readonly(edges), _readonly(element_edges),
                _readonly(edge_triangles), _readonly(counts))

    @property
    def edges(self) -> np.ndarray:
        """Global edges as sorted vertex pairs in lexicographic order."""
        return self._edge_data[0]

    @property
    def element_edges(self) -> np.ndarray:
        """Global edge index of local edge i per triangle, shape (nT, 3)."""
        return self._edge_data[1]

    @property
    def edge_triangles(self) -> np.ndarray:
        """Adjacent triangles per edge, lower index first; -1 on the boundary."""
        return self._edge_data[2]

    @property
    def edge_counts(self) -> np.ndarray:
        return self._edge_data[3]

    @cached_property
    def boundary_edge_flags(self) -> np.ndarray:
        return _readonly(self.edge_counts == 1)

    @cached_property
    def boundary_vertex_flags(self) -> np.ndarray:
        flags = np.zeros(self.n_vertices, dtype=bool)
        flags[self.edges[self.boundary_edge_flags].ravel()] = True
        return _readonly(flags)

    @property
    def refinement_edges(self) -> np.ndarray:
        return self.element_edges[:, 0]

    def total_area(self) -> float:
        return float(self.areas.sum())

    @property
    def domain_area(self) -> float:
        """Area of the root triangulation; refinements inherit it."""
        return self.total_area() if self._domain_area is None else self._domain_area


def make_mesh(vertices, triangles) -> Mesh:
    """Build a mesh, orienting triangles and picking initial refinement edges.

    Each triangle is made counter-clockwise; its refinement edge is the longest
    edge, ties broken by the smallest opposite-vertex index.
    """
    verts = np.array(vertices, dtype=float).reshape(-1, 2)
    tris = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    if len(tris) == 0:
        return Mesh(verts, tris)

    x = verts[tris]
    d1 = x[:, 1] - x[:, 0]
    d2 = x[:, 2] - x[:, 0]
    flip = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    x = verts[tris]
    sq_len = np.sum((np.roll(x, -2, axis=1) - np.roll(x, -1, axis=1)) ** 2, axis=2)
    longest = sq_len >= sq_len.max(axis=1, keepdims=True) * (1.0 - GEOMETRY_TOL)
    key = np.where(longest, tris, np.iinfo(np.int64).max)
    first = key.argmin(axis=1)
    rotation = (first[:, None] + np.arange(3)) % 3
    return Mesh(verts, np.take_along_axis(tris, rotation, axis=1))


def make_l_shape_initial() -> Mesh:
    """(-1,1)^2 minus [0,1)^2: three unit squares split through the re-entrant corner."""
    vertices = [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1)]
    triangles = [(0, 1, 4), (0, 4, 3), (1, 2, 4), (2, 5, 4), (3, 4, 6), (4, 7, 6)]
    return make_mesh(vertices, triangles)


def make_unit_square_initial() -> Mesh:
    """(0,1)^2 as two triangles split by the diagonal from (0,0) to (1,1)."""
    return make_mesh([(0, 0), (1, 0), (1, 1), (0, 1)], [(0, 1, 2), (0, 2, 3)])


def make_initial_mesh(domain: str) -> Mesh:
    builders = {
        'l-shape': make_l_shape_initial,
        'unit-square': make_unit_square_initial,
    }
    if domain not in builders:
        raise MeshError(f"unknown domain '{domain}' (expected one of {', '.join(builders)})")
    return builders[domain]()


def marked_set(mesh: Mesh, marked) -> MarkedSet:
    """Validate marked triangle indices (or a boolean mask) into a sorted index array."""
    arr = np.asarray(marked)
    if arr.dtype == bool:
        if arr.shape != (mesh.n_triangles,):
            raise MeshError("boolean marking must have one entry per triangle")
        return np.flatnonzero(arr)
    arr = arr.astype(np.int64, copy=False).ravel()
    if arr.size == 0:
        return arr
    if arr.min() < 0 or arr.max() >= mesh.n_triangles:
        raise MeshError(f"marked index out of range 0..{mesh.n_triangles - 1}")
    unique = np.unique(arr)
    if unique.size != arr.size:
        raise MeshError("marked set contains duplicates")
    return unique


def _closure(mesh: Mesh, marked: np.ndarray) -> np.ndarray:
    """Flag refinement edges of marked triangles and propagate to neighbours."""
    flagged = np.zeros(mesh.n_edges, dtype=bool)
    ref_edge = mesh.refinement_edges.tolist()
    neighbours = mesh.edge_triangles.tolist()
    stack = np.unique(mesh.refinement_edges[marked]).tolist()
    flagged[stack] = True
    while stack:
        edge = stack.pop()
        for tri in neighbours[edge]:
            if tri < 0:
                continue
            ref = ref_edge[tri]
            if not flagged[ref]:
                flagged[ref] = True
                stack.append(ref)
    return flagged


def refine_nvb(mesh: Mesh, marked) -> Mesh:
    """Bisect marked triangles at their refinement edges, with closure.

    The result is conforming and nested; children place the new vertex first,
    so their refinement edges are the edges opposite the new vertex.
    """
    if mesh.n_triangles == 0:
        raise MeshError("cannot refine an empty mesh")
    marked = marked_set(mesh, marked)
    if marked.size == 0:
        return mesh

    flagged = _closure(mesh, marked)
    new_edges = np.flatnonzero(flagged)
    midpoint = np.full(mesh.n_edges, -1, dtype=np.int64)
    midpoint[new_edges] = mesh.n_vertices + np.arange(len(new_edges))
    edge_pts = mesh.vertices[mesh.edges[new_edges]]
    vertices = np.vstack([mesh.vertices, 0.5 * (edge_pts[:, 0] + edge_pts[:, 1])])

    mids = midpoint[mesh.element_edges]
    split = mids >= 0
    code = split[:, 0] + 2 * split[:, 1] + 4 * split[:, 2]
    bad = np.flatnonzero((code > 0) & ~split[:, 0])
    if bad.size:
        raise RuntimeError(f"closure left {bad.size} triangles without a split refinement edge")

    n_children = np.zeros(8, dtype=np.int64)
    for pattern, children in _CHILDREN.items():
        n_children[pattern] = len(children)
    counts = n_children[code]
    offsets = np.cumsum(counts) - counts
    stacked = np.column_stack([mesh.triangles, mids])
    triangles = np.empty((counts.sum(), 3), dtype=np.int64)
    generation = np.empty(counts.sum(), dtype=np.int64)
    for pattern, children in _CHILDREN.items():
        sel = np.flatnonzero(code == pattern)
        if sel.size == 0:
            continue
        for j, (i0, i1, i2, inc) in enumerate(children):
            rows = offsets[sel] + j
            triangles[rows] = stacked[sel][:, [i0, i1, i2]]
            generation[rows] = mesh.generation[sel] + inc

    parent = np.repeat(np.arange(mesh.n_triangles), counts)
    ancestry = {mesh.uid: parent}
    for uid, tri_map in mesh.ancestry.items():
        if len(ancestry) >= ANCESTRY_DEPTH:
            break
        ancestry[uid] = tri_map[parent]

    log.debug("nvb: %d marked, %d edges bisected, %d -> %d triangles",
              marked.size, new_edges.size, mesh.n_triangles, len(triangles))
    return Mesh(vertices, triangles, generation, parent=parent, ancestry=ancestry,
                domain_area=mesh.domain_area)


def refine_uniform(mesh: Mesh, passes: int = 1) -> Mesh:
    for _ in range(passes):
        mesh = refine_nvb(mesh, np.arange(mesh.n_triangles))
    return mesh


def _hanging_nodes(mesh: Mesh, tol: float) -> List[Tuple[int, int, int]]:
    """(a, b, v) for every vertex v strictly inside a single-sided edge (a, b)."""
    single = mesh.edges[mesh.edge_counts == 1]
    candidates = np.unique(single)
    found = []
    if single.size == 0:
        return found
    a = mesh.vertices[single[:, 0]]
    d = mesh.vertices[single[:, 1]] - a
    dd = np.sum(d * d, axis=1)
    for start in range(0, len(candidates), 512):
        chunk = candidates[start:start + 512]
        w = mesh.vertices[chunk][:, None, :] - a[None, :, :]
        cross = d[None, :, 0] * w[..., 1] - d[None, :, 1] * w[..., 0]
        t = np.sum(w * d[None], axis=2) / dd[None]
        hit = (np.abs(cross) <= tol * dd[None]) & (t > tol) & (t < 1.0 - tol)
        for ci, ei in zip(*np.nonzero(hit)):
            found.append((int(single[ei, 0]), int(single[ei, 1]), int(chunk[ci])))
    return found


def check_conformity(mesh: Mesh, domain_area: Optional[float] = None) -> List[str]:
    """List every violated mesh invariant; empty iff the mesh is valid.

    Overlaps are caught by comparing the area sum with the domain area
    (the root triangulation's unless given) and by requiring the two
    triangles on an interior edge to traverse it in opposite directions.
    """
    report = []
    if mesh.n_triangles == 0:
        return ["empty mesh"]
    tri = mesh.triangles
    if tri.min() < 0 or tri.max() >= mesh.n_vertices:
        return ["vertex index out of range"]
    repeated = (tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])
    for t in np.flatnonzero(repeated):
        report.append(f"triangle {t}: repeated vertex {tuple(tri[t].tolist())}")
    if report:
        return report

    span = np.ptp(mesh.vertices, axis=0).max()
    tol = GEOMETRY_TOL * max(1.0, span * span)
    for t in np.flatnonzero(mesh.areas <= tol):
        report.append(f"triangle {t}: negative area ({mesh.areas[t]:.3e})")

    counts = mesh.edge_counts
    for e in np.flatnonzero(counts > 2):
        report.append(f"edge {tuple(mesh.edges[e].tolist())}: shared by {counts[e]} triangles")

    forward = np.roll(tri, -1, axis=1) < np.roll(tri, -2, axis=1)
    forward_count = np.bincount(mesh.element_edges.ravel(), weights=forward.ravel().astype(float),
                                minlength=mesh.n_edges)
    for e in np.flatnonzero((counts == 2) & (forward_count != 1)):
        report.append(f"edge {tuple(mesh.edges[e].tolist())}: folded, both triangles on one side")

    expected = mesh.domain_area if domain_area is None else float(domain_area)
    total = mesh.total_area()
    if abs(total - expected) > tol * max(1.0, mesh.n_triangles):
        report.append(f"area sum {total:.12g} differs from domain area {expected:.12g} (overlap or gap)")

    for a, b, v in _hanging_nodes(mesh, GEOMETRY_TOL):
        report.append(f"nonconforming edge ({a}, {b}): hanging node {v}")

    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[tri.ravel()] = True
    for v in np.flatnonzero(~used):
        report.append(f"vertex {v}: not used by any triangle")
    return report


def check_nestedness(coarse: Mesh, fine: Mesh) -> List[str]:
    """Check that every coarse triangle is the exact union of its descendants."""
    if fine.uid == coarse.uid:
        return []
    tri_map = fine.ancestry.get(coarse.uid)
    if tri_map is None:
        return [f"mesh {fine.uid} does not descend from mesh {coarse.uid}"]
    report = []
    child_area = np.bincount(tri_map, weights=fine.areas, minlength=coarse.n_triangles)
    rel = np.abs(child_area - coarse.areas) / np.abs(coarse.areas)
    for t in np.flatnonzero(rel > GEOMETRY_TOL):
        report.append(f"coarse triangle {t}: children cover {child_area[t]!r} of {coarse.areas[t]!r}")

    bary = barycentric(coarse, tri_map, fine.coords.reshape(-1, 3, 2).transpose(1, 0, 2))
    outside = np.any(bary < -GEOMETRY_TOL, axis=(0, 2))
    for t in np.flatnonzero(outside):
        report.append(f"fine triangle {t}: vertex outside parent {tri_map[t]}")
    return report


def barycentric(mesh: Mesh, tri_idx: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points (..., len(tri_idx), 2) in the given triangles."""
    x = mesh.coords[tri_idx]
    area2 = 2.0 * mesh.areas[tri_idx]
    rel1 = x[:, 1] - points
    rel2 = x[:, 2] - points
    rel0 = x[:, 0] - points
    l0 = (rel1[..., 0] * rel2[..., 1] - rel1[..., 1] * rel2[..., 0]) / area2
    l1 = (rel2[..., 0] * rel0[..., 1] - rel2[..., 1] * rel0[..., 0]) / area2
    return np.stack([l0, l1, 1.0 - l0 - l1], axis=-1)


def min_angle(mesh: Mesh) -> float:
    """Minimum interior angle over all triangles, in degrees."""
    x = mesh.coords
    smallest = np.inf
    for i in range(3):
        u = x[:, (i + 1) % 3] - x[:, i]
        v = x[:, (i + 2) % 3] - x[:, i]
        cos = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        smallest = min(smallest, float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).min()))
    return smallest


def export_mesh(mesh: Mesh) -> str:
    """OFF-like text: "V T", V lines "x y", T lines "i j k r"."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines.extend(f"{x!r} {y!r}" for x, y in mesh.vertices.tolist())
    lines.extend(f"{i} {j} {k} 0" for i, j, k in mesh.triangles.tolist())
    return "\n".join(lines) + "\n"


def import_mesh(text: str) -> Mesh:
    rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    try:
        n_vertices, n_triangles = (int(v) for v in rows[0])
        vertices = [(float(x), float(y)) for x, y in rows[1:1 + n_vertices]]
        records = [tuple(int(v) for v in row) for row in rows[1 + n_vertices:1 + n_vertices + n_triangles]]
        triangles = []
        for i, j, k, r in records:
            triangles.append((i, j, k)[r % 3:] + (i, j, k)[:r % 3])
    except (ValueError, IndexError) as e:
        raise MeshError(f"malformed mesh text: {e}") from e
    if len(vertices) != n_vertices or len(triangles) != n_triangles:
        raise MeshError(f"expected {n_vertices} vertices and {n_triangles} triangles")
    if any(r not in (0, 1, 2) for *_, r in records):
        raise MeshError("refinement edge index must be 0, 1 or 2")
    return Mesh(vertices, triangles)


def write_mesh(path: str, mesh: Mesh) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(export_mesh(mesh))


def read_mesh(path: str) -> Mesh:
    with open(path, encoding="utf-8") as handle:
        return import_mesh(handle.read())
