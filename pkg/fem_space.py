"""Lowest-order Raviart-Thomas x interior P1 degrees of freedom on a Mesh.

RT0 basis on triangle T for local edge E opposite vertex P:
    psi_E(x) = s_{T,E} |E| / (2|T|) (x - P),  div psi_E = s_{T,E} |E| / |T|,
so a coefficient is the normal component of the field on its edge. Global
edge normals point from the lower to the higher triangle index (outward on
the boundary); s_{T,E} = +1 on the lower-index triangle.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from mesh import GEOMETRY_TOL, Mesh, barycentric

log = logging.getLogger(__name__)

# DOFs per mesh entity for polynomial degree m; only m = 0 is implemented.
DOFS_PER_ENTITY = {0: {"edge": 1, "vertex": 1}}


class MeshMismatchError(ValueError):
    """A solution or DOF map does not belong to the mesh it is used with."""


class PointOutsideError(ValueError):
    """Evaluation point lies outside the requested triangle."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class DofMap:
    """Edge-based RT0 DOFs and interior-vertex S1_0 DOFs of one mesh."""

    def __init__(self, mesh: Mesh, degree: int = 0):
        if degree not in DOFS_PER_ENTITY:
            raise NotImplementedError(f"polynomial degree m={degree} is not implemented")
        self.degree = degree
        self.mesh_uid = mesh.uid
        self.edge_list = mesh.edges
        self.element_rt_dofs = mesh.element_edges

        owner = mesh.edge_triangles[mesh.element_edges, 0]
        is_owner = owner == np.arange(mesh.n_triangles)[:, None]
        self.rt_sign = _readonly(np.where(is_owner, 1.0, -1.0))

        interior = ~mesh.boundary_vertex_flags
        index = np.full(mesh.n_vertices, -1, dtype=np.int64)
        index[interior] = np.arange(np.count_nonzero(interior))
        self.interior_vertex_index = _readonly(index)
        self.element_s1_dofs = _readonly(index[mesh.triangles])

        self.n_rt = int(mesh.n_edges)
        self.n_s1 = int(np.count_nonzero(interior))

    def __repr__(self) -> str:
        return f"DofMap(mesh={self.mesh_uid}, n_rt={self.n_rt}, n_s1={self.n_s1})"

    @property
    def n_dofs(self) -> int:
        return self.n_rt + self.n_s1

    def element_dofs(self) -> np.ndarray:
        """Global DOF indices per triangle, (nT, 6): 3 RT then 3 S1 (-1 on the boundary)."""
        s1 = np.where(self.element_s1_dofs >= 0, self.element_s1_dofs + self.n_rt, -1)
        return np.hstack([self.element_rt_dofs, s1])

    def check(self, mesh: Mesh) -> None:
        if mesh.uid != self.mesh_uid:
            raise MeshMismatchError(f"DOF map of mesh {self.mesh_uid} used with mesh {mesh.uid}")


def build_dof_map(mesh: Mesh) -> DofMap:
    return DofMap(mesh)


@dataclass(frozen=True, eq=False)
class DiscreteSolution:
    """Coefficients of (p_h, u_h) in RT0 x S1_0 on the mesh with uid mesh_id."""

    rt_coeffs: np.ndarray
    s1_coeffs: np.ndarray
    mesh_id: int

    @classmethod
    def zeros(cls, dofmap: DofMap) -> "DiscreteSolution":
        return cls(np.zeros(dofmap.n_rt), np.zeros(dofmap.n_s1), dofmap.mesh_uid)

    @classmethod
    def from_vector(cls, dofmap: DofMap, x: np.ndarray) -> "DiscreteSolution":
        x = np.asarray(x, dtype=float)
        if x.shape != (dofmap.n_dofs,):
            raise MeshMismatchError(f"vector of length {x.size} for {dofmap.n_dofs} DOFs")
        return cls(x[:dofmap.n_rt].copy(), x[dofmap.n_rt:].copy(), dofmap.mesh_uid)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rt_coeffs, self.s1_coeffs])

    def check(self, dofmap: DofMap) -> None:
        if self.mesh_id != dofmap.mesh_uid:
            raise MeshMismatchError(f"solution of mesh {self.mesh_id} used on mesh {dofmap.mesh_uid}")
        if len(self.rt_coeffs) != dofmap.n_rt or len(self.s1_coeffs) != dofmap.n_s1:
            raise MeshMismatchError("solution length does not match the DOF map")


# Element kernels, vectorized over all triangles.

def rt_element_weights(mesh: Mesh, dofmap: DofMap, rt_coeffs: np.ndarray) -> np.ndarray:
    """k_i = s_i c_i |E_i| / (2|T|), so p = sum_i k_i (x - P_i) on T."""
    coeffs = np.asarray(rt_coeffs, dtype=float)[dofmap.element_rt_dofs]
    return dofmap.rt_sign * coeffs * mesh.local_edge_lengths / (2.0 * mesh.areas[:, None])


def rt_affine(mesh: Mesh, dofmap: DofMap, rt_coeffs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(kappa, q) with p(x) = kappa x - q on each triangle."""
    k = rt_element_weights(mesh, dofmap, rt_coeffs)
    return k.sum(axis=1), np.einsum("ti,tid->td", k, mesh.coords)


def rt_values(mesh: Mesh, dofmap: DofMap, rt_coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Field values at per-triangle points of shape (nT, nq, 2)."""
    kappa, q = rt_affine(mesh, dofmap, rt_coeffs)
    return kappa[:, None, None] * points - q[:, None, :]


def rt_divergence(mesh: Mesh, dofmap: DofMap, rt_coeffs: np.ndarray) -> np.ndarray:
    return 2.0 * rt_element_weights(mesh, dofmap, rt_coeffs).sum(axis=1)


def p1_gradients(mesh: Mesh) -> np.ndarray:
    """Gradients of the barycentric coordinates, shape (nT, 3, 2)."""
    t = mesh.local_edge_vectors
    return np.stack([-t[..., 1], t[..., 0]], axis=-1) / (2.0 * mesh.areas[:, None, None])


def s1_nodal_values(dofmap: DofMap, s1_coeffs: np.ndarray) -> np.ndarray:
    dofs = dofmap.element_s1_dofs
    padded = np.append(np.asarray(s1_coeffs, dtype=float), 0.0)
    return padded[np.where(dofs >= 0, dofs, len(padded) - 1)]


def s1_gradients(mesh: Mesh, dofmap: DofMap, s1_coeffs: np.ndarray) -> np.ndarray:
    return np.einsum("ti,tid->td", s1_nodal_values(dofmap, s1_coeffs), p1_gradients(mesh))


def l2_norm_div(mesh: Mesh, dofmap: DofMap, rt_coeffs: np.ndarray) -> float:
    return float(np.sqrt(np.sum(mesh.areas * rt_divergence(mesh, dofmap, rt_coeffs) ** 2)))


# Single-triangle evaluation.

def _require_inside(mesh: Mesh, tri: int, point) -> np.ndarray:
    point = np.asarray(point, dtype=float)
    bary = barycentric(mesh, np.array([tri]), point[None, :])[0]
    if np.any(bary < -GEOMETRY_TOL):
        raise PointOutsideError(f"point {tuple(point.tolist())} outside triangle {tri}")
    return bary


def eval_rt0(mesh: Mesh, dofmap: DofMap, tri: int, rt_coeffs: np.ndarray, point) -> np.ndarray:
    _require_inside(mesh, tri, point)
    k = rt_element_weights(mesh, dofmap, rt_coeffs)[tri]
    return np.einsum("i,id->d", k, np.asarray(point, dtype=float) - mesh.coords[tri])


def div_rt0(mesh: Mesh, dofmap: DofMap, tri: int, rt_coeffs: np.ndarray) -> float:
    coeffs = np.asarray(rt_coeffs, dtype=float)[dofmap.element_rt_dofs[tri]]
    return float(np.sum(dofmap.rt_sign[tri] * coeffs * mesh.local_edge_lengths[tri]) / mesh.areas[tri])


def grad_s1(mesh: Mesh, dofmap: DofMap, tri: int, s1_coeffs: np.ndarray) -> np.ndarray:
    values = s1_nodal_values(dofmap, s1_coeffs)[tri]
    return values @ p1_gradients(mesh)[tri]


def eval_s1(mesh: Mesh, dofmap: DofMap, tri: int, s1_coeffs: np.ndarray, point) -> float:
    bary = _require_inside(mesh, tri, point)
    return float(bary @ s1_nodal_values(dofmap, s1_coeffs)[tri])


def prolongate(sol: DiscreteSolution, coarse: Mesh, fine: Mesh, fine_dofmap: DofMap) -> DiscreteSolution:
    """Represent a coarse discrete solution exactly on a refined mesh."""
    if sol.mesh_id != coarse.uid:
        raise MeshMismatchError(f"solution of mesh {sol.mesh_id} prolongated from mesh {coarse.uid}")
    fine_dofmap.check(fine)
    if fine.uid == coarse.uid:
        return DiscreteSolution(sol.rt_coeffs.copy(), sol.s1_coeffs.copy(), fine.uid)
    parents = fine.ancestry.get(coarse.uid)
    if parents is None:
        raise MeshMismatchError(f"mesh {fine.uid} is not a known refinement of mesh {coarse.uid}")
    coarse_dofmap = DofMap(coarse)

    corners = fine.coords.transpose(1, 0, 2)
    bary = barycentric(coarse, parents, corners)
    nodal = s1_nodal_values(coarse_dofmap, sol.s1_coeffs)[parents]
    values = np.einsum("jtk,tk->tj", bary, nodal)
    s1 = np.zeros(fine_dofmap.n_s1)
    dofs = fine_dofmap.element_s1_dofs
    inside = dofs >= 0
    s1[dofs[inside]] = values[inside]

    owner = fine.edge_triangles[:, 0]
    edge_ids = np.arange(fine.n_edges)
    local = np.argmax(fine.element_edges[owner] == edge_ids[:, None], axis=1)
    ends = fine.vertices[fine.edges]
    midpoints = 0.5 * (ends[:, 0] + ends[:, 1])
    kappa, q = rt_affine(coarse, coarse_dofmap, sol.rt_coeffs)
    host = parents[owner]
    field = kappa[host, None] * midpoints - q[host]
    rt = np.sum(field * fine.outward_normals[owner, local], axis=1)

    log.debug("prolongated mesh %d -> %d (%d -> %d dofs)",
              coarse.uid, fine.uid, coarse_dofmap.n_dofs, fine_dofmap.n_dofs)
    return DiscreteSolution(rt, s1, fine.uid)


def write_solution(path: str, sol: DiscreteSolution, k: int, ell: int, flux_sign: float = 1.0) -> None:
    """Header "k ell n_rt n_s1", then one coefficient per line (RT first)."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{k} {ell} {len(sol.rt_coeffs)} {len(sol.s1_coeffs)}\n")
        for value in (flux_sign * sol.rt_coeffs).tolist():
            handle.write(f"{value!r}\n")
        for value in sol.s1_coeffs.tolist():
            handle.write(f"{value!r}\n")


def read_solution(path: str, mesh_id: int = 0) -> Tuple[int, int, DiscreteSolution]:
    with open(path, encoding="utf-8") as handle:
        k, ell, n_rt, n_s1 = (int(v) for v in handle.readline().split())
        values = np.array([float(line) for line in handle if line.strip()])
    if len(values) != n_rt + n_s1:
        raise MeshMismatchError(f"expected {n_rt + n_s1} coefficients, found {len(values)}")
    return k, ell, DiscreteSolution(values[:n_rt], values[n_rt:], mesh_id)
