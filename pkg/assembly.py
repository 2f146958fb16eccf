"""Assembly of the weighted least-squares form and its right-hand sides.

All forms are written in the unified weighting

    A(p,u; q,v) = w1^2 C_F^2 (div p, div q) + (a p - b grad u, a q - b grad v)

so one code path serves every scheme. Load vectors are assembled from
per-element moments of the data: for a scalar s tested against div q and a
vector g tested against a q - b grad v only int_T s, int_T g and
int_T g.(x - x_T) are needed, because div q and grad v are elementwise
constant and q is affine.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from fem_space import (DiscreteSolution, DofMap, p1_gradients, rt_affine, rt_divergence,
                       s1_gradients)
from mesh import Mesh, make_initial_mesh, refine_uniform
from nonlinearity import Nonlinearity, WeightedScheme

log = logging.getLogger(__name__)

DEFAULT_SOURCE_DEGREE = 4

_RULES = {
    1: ([(1 / 3, 1 / 3, 1 / 3)], [0.5]),
    2: ([(0.5, 0.5, 0.0), (0.0, 0.5, 0.5), (0.5, 0.0, 0.5)], [1 / 6, 1 / 6, 1 / 6]),
    3: ([(1 / 3, 1 / 3, 1 / 3), (0.6, 0.2, 0.2), (0.2, 0.6, 0.2), (0.2, 0.2, 0.6)],
        [-27 / 96, 25 / 96, 25 / 96, 25 / 96]),
    4: ([(0.108103018168070, 0.445948490915965, 0.445948490915965),
         (0.445948490915965, 0.108103018168070, 0.445948490915965),
         (0.445948490915965, 0.445948490915965, 0.108103018168070),
         (0.816847572980459, 0.091576213509771, 0.091576213509771),
         (0.091576213509771, 0.816847572980459, 0.091576213509771),
         (0.091576213509771, 0.091576213509771, 0.816847572980459)],
        [0.223381589678011 / 2] * 3 + [0.109951743655322 / 2] * 3),
}


def quadrature_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Points (nq, 2) and weights (nq,) on the reference triangle (0,0), (1,0), (0,1)."""
    if degree not in _RULES:
        raise ValueError(f"unsupported quadrature degree {degree} (expected 1..4)")
    bary, weights = _RULES[degree]
    bary = np.array(bary)
    return bary[:, 1:].copy(), np.array(weights)


def quadrature_points(mesh: Mesh, degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Physical points (nT, nq, 2) and weights (nT, nq) of the rule on every triangle."""
    ref, weights = quadrature_rule(degree)
    x = mesh.coords
    points = (x[:, None, 0] + ref[None, :, 0, None] * (x[:, None, 1] - x[:, None, 0])
              + ref[None, :, 1, None] * (x[:, None, 2] - x[:, None, 0]))
    return points, 2.0 * mesh.areas[:, None] * weights[None, :]


def central_second_moments(mesh: Mesh) -> np.ndarray:
    """int_T |x - x_T|^2 per triangle (edge-midpoint rule, exact for quadratics)."""
    x = mesh.coords
    mids = 0.5 * (x + np.roll(x, -1, axis=1))
    rel = mids - mesh.centroids[:, None, :]
    return mesh.areas * np.sum(rel ** 2, axis=(1, 2)) / 3.0


# Source data.

@dataclass(frozen=True)
class FieldMoments:
    """Per-element integral, centred first moment and integral of the square.

    For a scalar field: integral (nT,), first (nT, 2) = int f (x - x_T).
    For a vector field: integral (nT, 2), first (nT,) = int f.(x - x_T).
    """

    integral: np.ndarray
    first: np.ndarray
    square: np.ndarray


class Field:
    """Scalar (rank 0) or vector (rank 1) data evaluated at quadrature points.

    fn receives points of shape (nT, nq, 2); with per_element=True it is
    called as fn(mesh, points), so discrete functions can be wrapped too.
    """

    cache_size = 4

    def __init__(self, fn: Callable, rank: int = 0, per_element: bool = False,
                 degree: Optional[int] = None):
        if rank not in (0, 1):
            raise ValueError(f"field rank must be 0 or 1 (got {rank})")
        self.fn = fn
        self.rank = rank
        self.per_element = per_element
        self.degree = degree
        self._cache: "OrderedDict[Tuple[int, int], FieldMoments]" = OrderedDict()

    def values(self, mesh: Mesh, points: np.ndarray) -> np.ndarray:
        out = self.fn(mesh, points) if self.per_element else self.fn(points)
        shape = points.shape[:-1] + ((2,) if self.rank else ())
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    def moments(self, mesh: Mesh, degree: int = DEFAULT_SOURCE_DEGREE) -> FieldMoments:
        degree = self.degree or degree
        key = (mesh.uid, degree)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._compute_moments(mesh, degree)
            self._cache[key] = hit
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return hit

    def _compute_moments(self, mesh: Mesh, degree: int) -> FieldMoments:
        points, weights = quadrature_points(mesh, degree)
        rel = points - mesh.centroids[:, None, :]
        vals = self.values(mesh, points)
        if self.rank == 0:
            return FieldMoments(
                integral=np.einsum("tq,tq->t", weights, vals),
                first=np.einsum("tq,tq,tqd->td", weights, vals, rel),
                square=np.einsum("tq,tq->t", weights, vals ** 2),
            )
        return FieldMoments(
            integral=np.einsum("tq,tqd->td", weights, vals),
            first=np.einsum("tq,tqd,tqd->t", weights, vals, rel),
            square=np.einsum("tq,tqd->t", weights, vals ** 2),
        )


class ConstantField(Field):
    def __init__(self, value, rank: int = 0):
        self.value = float(value) if rank == 0 else np.asarray(value, dtype=float).reshape(2)
        super().__init__(lambda points: self.value, rank)

    def _compute_moments(self, mesh: Mesh, degree: int) -> FieldMoments:
        areas = mesh.areas
        if self.rank == 0:
            return FieldMoments(areas * self.value, np.zeros((mesh.n_triangles, 2)),
                                areas * self.value ** 2)
        return FieldMoments(areas[:, None] * self.value, np.zeros(mesh.n_triangles),
                            areas * float(self.value @ self.value))

    def __repr__(self) -> str:
        return f"ConstantField({self.value})"


def _clip_polygon(poly, axis: int, bound: float, keep_below: bool):
    out = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        cur_in = cur[axis] <= bound if keep_below else cur[axis] >= bound
        nxt_in = nxt[axis] <= bound if keep_below else nxt[axis] >= bound
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            t = (bound - cur[axis]) / (nxt[axis] - cur[axis])
            out.append(cur + t * (nxt - cur))
    return out


def _polygon_area_centroid(poly) -> Tuple[float, np.ndarray]:
    if len(poly) < 3:
        return 0.0, np.zeros(2)
    pts = np.array(poly)
    nxt = np.roll(pts, -1, axis=0)
    cross = pts[:, 0] * nxt[:, 1] - nxt[:, 0] * pts[:, 1]
    area = 0.5 * cross.sum()
    if abs(area) < 1e-300:
        return 0.0, np.zeros(2)
    centroid = ((pts + nxt) * cross[:, None]).sum(axis=0) / (6.0 * area)
    return float(area), centroid


class BoxIndicator(Field):
    """Indicator function of the box [lower, upper], integrated exactly by clipping."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float).reshape(2)
        self.upper = np.asarray(upper, dtype=float).reshape(2)
        if np.any(self.upper <= self.lower):
            raise ValueError("box upper corner must exceed the lower corner")
        super().__init__(self._indicator, rank=0)

    def __repr__(self) -> str:
        return f"BoxIndicator({self.lower.tolist()}, {self.upper.tolist()})"

    def _indicator(self, points):
        inside = np.all((points >= self.lower) & (points <= self.upper), axis=-1)
        return inside.astype(float)

    def _compute_moments(self, mesh: Mesh, degree: int) -> FieldMoments:
        x = mesh.coords
        integral = np.zeros(mesh.n_triangles)
        first = np.zeros((mesh.n_triangles, 2))
        lo, hi = x.min(axis=1), x.max(axis=1)
        touching = np.all((hi > self.lower) & (lo < self.upper), axis=1)
        contained = np.all((lo >= self.lower) & (hi <= self.upper), axis=1)
        integral[contained] = mesh.areas[contained]
        for t in np.flatnonzero(touching & ~contained):
            poly = list(x[t])
            for axis in (0, 1):
                poly = _clip_polygon(poly, axis, self.lower[axis], keep_below=False)
                poly = _clip_polygon(poly, axis, self.upper[axis], keep_below=True)
                if not poly:
                    break
            area, centroid = _polygon_area_centroid(poly)
            integral[t] = area
            first[t] = area * (centroid - mesh.centroids[t])
        return FieldMoments(integral, first, integral.copy())


# Problems.

@dataclass
class ProblemSpec:
    """-div p = f1 and p - sigma(grad u) = -f2 in the domain, u = 0 on its boundary."""

    domain: str
    f1: Field
    f2: Field
    nonlinearity: Nonlinearity
    c_f: float
    prerefine: int = 0
    exact_flux: Optional[Callable] = None
    exact_u: Optional[Callable] = None
    source_degree: int = DEFAULT_SOURCE_DEGREE

    def __post_init__(self):
        if not self.c_f > 0:
            raise ValueError(f"Friedrichs constant must be positive (got {self.c_f})")
        if self.f1.rank != 0 or self.f2.rank != 1:
            raise ValueError("f1 must be a scalar field and f2 a vector field")

    def initial_mesh(self) -> Mesh:
        return refine_uniform(make_initial_mesh(self.domain), self.prerefine)


@dataclass
class LinearData:
    """Static data of the linear problem: LS(g1, g2; q, v) = C_F^2 |g1 + w1 div q|^2 + |g2 + a q - b grad v|^2."""

    g1: Field
    g2: Field
    c_f: float
    domain: str = "unit-square"
    source_degree: int = DEFAULT_SOURCE_DEGREE
    exact_flux: Optional[Callable] = None
    exact_u: Optional[Callable] = None

    def initial_mesh(self) -> Mesh:
        return make_initial_mesh(self.domain)


# System matrix.

@dataclass(eq=False)
class SparseSpdSystem:
    matrix: sp.csr_matrix
    n_rt: int
    n_s1: int
    mesh_uid: int
    scheme: Optional[WeightedScheme] = None
    c_f: float = 1.0
    factorization: Optional[object] = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return self.n_rt + self.n_s1

    def quadratic_form(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ (self.matrix @ x))


def _element_blocks(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float,
                    coupling: bool = True) -> np.ndarray:
    """Local 6x6 matrices (3 RT then 3 S1) per triangle."""
    areas = mesh.areas
    c = dofmap.rt_sign * mesh.local_edge_lengths / (2.0 * areas[:, None])
    rel = mesh.centroids[:, None, :] - mesh.coords
    grads = p1_gradients(mesh)
    second = central_second_moments(mesh)
    div_weight = scheme.w1_sq * c_f ** 2

    cc = c[:, :, None] * c[:, None, :]
    rr = (4.0 * div_weight * cc * areas[:, None, None]
          + scheme.a ** 2 * cc * (second[:, None, None]
                                  + areas[:, None, None] * np.einsum("tid,tjd->tij", rel, rel)))
    ss = scheme.b ** 2 * areas[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    local = np.zeros((mesh.n_triangles, 6, 6))
    local[:, :3, :3] = rr
    local[:, 3:, 3:] = ss
    if coupling:
        rs = -scheme.a * scheme.b * c[:, :, None] * areas[:, None, None] * np.einsum("tid,tjd->tij", rel, grads)
        local[:, :3, 3:] = rs
        local[:, 3:, :3] = rs.transpose(0, 2, 1)
    return local


def _global_matrix(dofmap: DofMap, local: np.ndarray) -> sp.csr_matrix:
    dofs = dofmap.element_dofs()
    rows = np.repeat(dofs, 6, axis=1)
    cols = np.tile(dofs, (1, 6))
    vals = local.reshape(len(dofs), 36)
    keep = (rows >= 0) & (cols >= 0)
    n = dofmap.n_dofs
    matrix = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


def assemble_system(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float) -> SparseSpdSystem:
    dofmap.check(mesh)
    matrix = _global_matrix(dofmap, _element_blocks(mesh, dofmap, scheme, c_f))
    log.debug("assembled %d x %d system, nnz=%d (mesh %d)", dofmap.n_dofs, dofmap.n_dofs,
              matrix.nnz, mesh.uid)
    return SparseSpdSystem(matrix, dofmap.n_rt, dofmap.n_s1, mesh.uid, scheme, c_f)


def assemble_weighted_norm(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float) -> sp.csr_matrix:
    """Gram matrix of w1^2 C_F^2 |div p|^2 + |a p|^2 + |b grad u|^2."""
    dofmap.check(mesh)
    return _global_matrix(dofmap, _element_blocks(mesh, dofmap, scheme, c_f, coupling=False))


# Load vectors.

def _load_vector(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float,
                 s_int: np.ndarray, g_int: np.ndarray, g_first: np.ndarray) -> np.ndarray:
    """Entries w1^2 C_F^2 (s, div q) + (g, a q - b grad v) over the basis."""
    areas = mesh.areas
    c = dofmap.rt_sign * mesh.local_edge_lengths / (2.0 * areas[:, None])
    rel = mesh.centroids[:, None, :] - mesh.coords
    rt_local = (2.0 * scheme.w1_sq * c_f ** 2 * c * s_int[:, None]
                + scheme.a * c * (g_first[:, None] + np.einsum("tid,td->ti", rel, g_int)))
    s1_local = -scheme.b * np.einsum("tjd,td->tj", p1_gradients(mesh), g_int)

    out = np.zeros(dofmap.n_dofs)
    np.add.at(out, dofmap.element_rt_dofs.ravel(), rt_local.ravel())
    s1_dofs = dofmap.element_s1_dofs.ravel()
    inside = s1_dofs >= 0
    np.add.at(out, dofmap.n_rt + s1_dofs[inside], s1_local.ravel()[inside])
    return out


@dataclass(frozen=True)
class DiscreteTerms:
    """Elementwise pieces of a discrete pair: div p, p = kappa x - q, p(x_T), grad u, sigma(grad u)."""

    div: np.ndarray
    kappa: np.ndarray
    centre_value: np.ndarray
    grad: np.ndarray
    flux: Optional[np.ndarray]


def discrete_terms(mesh: Mesh, dofmap: DofMap, sol: DiscreteSolution,
                   nl: Optional[Nonlinearity] = None) -> DiscreteTerms:
    sol.check(dofmap)
    kappa, q = rt_affine(mesh, dofmap, sol.rt_coeffs)
    grad = s1_gradients(mesh, dofmap, sol.s1_coeffs)
    return DiscreteTerms(
        div=rt_divergence(mesh, dofmap, sol.rt_coeffs),
        kappa=kappa,
        centre_value=kappa[:, None] * mesh.centroids - q,
        grad=grad,
        flux=None if nl is None else nl.sigma(grad),
    )


def _affine_moments(mesh: Mesh, alpha: np.ndarray, centre: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """int g and int g.(x - x_T) for g = alpha (x - x_T) + centre."""
    return mesh.areas[:, None] * centre, alpha * central_second_moments(mesh)


def apply_operator_b(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float,
                     sol: DiscreteSolution, nl: Nonlinearity) -> np.ndarray:
    """B(p, u; .) = w1^2 C_F^2 (div p, div .) + (p - sigma(grad u), a . - b grad .)."""
    terms = discrete_terms(mesh, dofmap, sol, nl)
    g_int, g_first = _affine_moments(mesh, terms.kappa, terms.centre_value - terms.flux)
    return _load_vector(mesh, dofmap, scheme, c_f, mesh.areas * terms.div, g_int, g_first)


def assemble_source_rhs(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float,
                        problem: ProblemSpec) -> np.ndarray:
    """F(.) = -w1^2 C_F^2 (f1, div .) - (f2, a . - b grad .)."""
    f1 = problem.f1.moments(mesh, problem.source_degree)
    f2 = problem.f2.moments(mesh, problem.source_degree)
    return _load_vector(mesh, dofmap, scheme, c_f, -f1.integral, -f2.integral, -f2.first)


def assemble_zarantonello_rhs(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float,
                              delta: float, prev: DiscreteSolution, problem: ProblemSpec) -> np.ndarray:
    """A(prev; .) + delta [F(.) - B(prev; .)] in one elementwise pass."""
    terms = discrete_terms(mesh, dofmap, prev, problem.nonlinearity)
    f1 = problem.f1.moments(mesh, problem.source_degree)
    f2 = problem.f2.moments(mesh, problem.source_degree)

    s_int = (1.0 - delta) * mesh.areas * terms.div - delta * f1.integral
    alpha = (scheme.a - delta) * terms.kappa
    centre = ((scheme.a - delta) * terms.centre_value - scheme.b * terms.grad
              + delta * terms.flux)
    g_int, g_first = _affine_moments(mesh, alpha, centre)
    return _load_vector(mesh, dofmap, scheme, c_f, s_int,
                        g_int - delta * f2.integral, g_first - delta * f2.first)


def assemble_linear_ls_rhs(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float,
                           g1: Field, g2: Field, degree: int = DEFAULT_SOURCE_DEGREE) -> np.ndarray:
    """-C_F^2 (g1, w1 div .) - (g2, a . - b grad .)."""
    dofmap.check(mesh)
    m1 = g1.moments(mesh, degree)
    m2 = g2.moments(mesh, degree)
    return _load_vector(mesh, dofmap, scheme, c_f, -m1.integral / scheme.w1, -m2.integral, -m2.first)


def zarantonello_data(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, delta: float,
                      prev: DiscreteSolution, problem: ProblemSpec) -> Tuple[Field, Field]:
    """Linear data (g1, g2) whose least-squares problem is one Zarantonello step.

    g1 = -w1 div p' + delta w1 (f1 + div p')
    g2 = -a p' + b grad u' + delta (f2 + p' - sigma(grad u'))
    """
    terms = discrete_terms(mesh, dofmap, prev, problem.nonlinearity)
    w1 = scheme.w1
    uid = mesh.uid

    def _on(m: Mesh):
        if m.uid != uid:
            raise ValueError(f"data built on mesh {uid} evaluated on mesh {m.uid}")

    def g1(m, points):
        _on(m)
        div = terms.div[:, None]
        return -w1 * div + delta * w1 * (problem.f1.values(m, points) + div)

    def g2(m, points):
        _on(m)
        p = terms.kappa[:, None, None] * (points - m.centroids[:, None, :]) + terms.centre_value[:, None, :]
        const = scheme.b * terms.grad - delta * terms.flux
        return ((delta - scheme.a) * p + const[:, None, :]
                + delta * problem.f2.values(m, points))

    return Field(g1, 0, per_element=True), Field(g2, 1, per_element=True)

