"""Elementwise error estimators and Doerfler bulk marking.

Every estimator is a sum of squared L2 residuals. The scalar residual is
elementwise c + t f, the vector residual alpha (x - x_T) + beta + t g with
data moments from assembly, so all integrals are exact for discrete terms.
"""

import csv
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from assembly import (DEFAULT_SOURCE_DEGREE, Field, FieldMoments, ProblemSpec, assemble_system,
                      assemble_zarantonello_rhs, central_second_moments, discrete_terms,
                      quadrature_points)
from fem_space import (DiscreteSolution, DofMap, build_dof_map, prolongate, rt_divergence,
                       rt_values, s1_gradients)
from linear_solver import factorize, solve
from mesh import Mesh, MarkedSet, refine_uniform
from nonlinearity import WeightedScheme

log = logging.getLogger(__name__)

KINDS = ("linear-eta", "eta-k", "mu-k", "nonlinear-N")
TIE_BREAKS = ("ascending", "descending")


@dataclass(frozen=True)
class EstimatorReport:
    local: np.ndarray
    kind: str

    @property
    def total(self) -> float:
        return float(np.sum(self.local))

    @property
    def value(self) -> float:
        return float(np.sqrt(self.total))

    def __repr__(self) -> str:
        return f"EstimatorReport({self.kind}, value={self.value:.6g}, n={len(self.local)})"


def _scalar_sq(mesh: Mesh, c: np.ndarray, t: float = 0.0,
               data: Optional[FieldMoments] = None) -> np.ndarray:
    """int_T (c + t f)^2."""
    out = mesh.areas * c ** 2
    if data is not None and t != 0.0:
        out = out + 2.0 * t * c * data.integral + t * t * data.square
    return out


def _vector_sq(mesh: Mesh, alpha: np.ndarray, centre: np.ndarray, t: float = 0.0,
               data: Optional[FieldMoments] = None) -> np.ndarray:
    """int_T |alpha (x - x_T) + centre + t g|^2."""
    out = alpha ** 2 * central_second_moments(mesh) + mesh.areas * np.sum(centre ** 2, axis=1)
    if data is not None and t != 0.0:
        cross = alpha * data.first + np.sum(centre * data.integral, axis=1)
        out = out + 2.0 * t * cross + t * t * data.square
    return out


def _report(scalar: np.ndarray, vector: np.ndarray, kind: str) -> EstimatorReport:
    return EstimatorReport(np.maximum(scalar + vector, 0.0), kind)


def _check_mesh(mesh: Mesh, dofmap: DofMap, *solutions: DiscreteSolution) -> None:
    dofmap.check(mesh)
    for sol in solutions:
        sol.check(dofmap)


def eta_k(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float, delta: float,
          prev: DiscreteSolution, current: DiscreteSolution, problem: ProblemSpec) -> EstimatorReport:
    """Local residuals of one linearized step; the global square equals Z_k(current)."""
    _check_mesh(mesh, dofmap, prev, current)
    old = discrete_terms(mesh, dofmap, prev, problem.nonlinearity)
    new = discrete_terms(mesh, dofmap, current)
    f1 = problem.f1.moments(mesh, problem.source_degree)
    f2 = problem.f2.moments(mesh, problem.source_degree)

    scalar = _scalar_sq(mesh, new.div - (1.0 - delta) * old.div, delta, f1)
    alpha = scheme.a * (new.kappa - old.kappa) + delta * old.kappa
    centre = (scheme.a * (new.centre_value - old.centre_value) - scheme.b * (new.grad - old.grad)
              + delta * (old.centre_value - old.flux))
    vector = _vector_sq(mesh, alpha, centre, delta, f2)
    return _report(scheme.w1_sq * c_f ** 2 * scalar, vector, "eta-k")


def mu_k(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float,
         prev: DiscreteSolution, current: DiscreteSolution) -> EstimatorReport:
    """Local contributions of |||current - prev|||_A^2."""
    _check_mesh(mesh, dofmap, prev, current)
    old = discrete_terms(mesh, dofmap, prev)
    new = discrete_terms(mesh, dofmap, current)
    scalar = _scalar_sq(mesh, new.div - old.div)
    centre = scheme.a * (new.centre_value - old.centre_value) - scheme.b * (new.grad - old.grad)
    vector = _vector_sq(mesh, scheme.a * (new.kappa - old.kappa), centre)
    return _report(scheme.w1_sq * c_f ** 2 * scalar, vector, "mu-k")


def nonlinear_functional(mesh: Mesh, dofmap: DofMap, problem: ProblemSpec, c_f: float,
                         solution: DiscreteSolution) -> EstimatorReport:
    """C_F^2 |f1 + div p|^2 + |f2 + p - sigma(grad u)|^2 per element."""
    _check_mesh(mesh, dofmap, solution)
    terms = discrete_terms(mesh, dofmap, solution, problem.nonlinearity)
    f1 = problem.f1.moments(mesh, problem.source_degree)
    f2 = problem.f2.moments(mesh, problem.source_degree)
    scalar = _scalar_sq(mesh, terms.div, 1.0, f1)
    vector = _vector_sq(mesh, terms.kappa, terms.centre_value - terms.flux, 1.0, f2)
    return _report(c_f ** 2 * scalar, vector, "nonlinear-N")


def linear_eta(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float,
               g1: Field, g2: Field, solution: DiscreteSolution,
               degree: int = DEFAULT_SOURCE_DEGREE) -> EstimatorReport:
    """C_F^2 |g1 + w1 div q|^2 + |g2 + a q - b grad v|^2 per element."""
    _check_mesh(mesh, dofmap, solution)
    terms = discrete_terms(mesh, dofmap, solution)
    m1 = g1.moments(mesh, degree)
    m2 = g2.moments(mesh, degree)
    scalar = _scalar_sq(mesh, scheme.w1 * terms.div, 1.0, m1)
    centre = scheme.a * terms.centre_value - scheme.b * terms.grad
    vector = _vector_sq(mesh, scheme.a * terms.kappa, centre, 1.0, m2)
    return _report(c_f ** 2 * scalar, vector, "linear-eta")


def least_squares_value(mesh: Mesh, dofmap: DofMap, scheme: WeightedScheme, c_f: float,
                        g1: Field, g2: Field, solution: DiscreteSolution,
                        degree: int = DEFAULT_SOURCE_DEGREE) -> np.ndarray:
    """LS(g1, g2; q, v) per element by pointwise quadrature."""
    _check_mesh(mesh, dofmap, solution)
    points, weights = quadrature_points(mesh, degree)
    div = rt_divergence(mesh, dofmap, solution.rt_coeffs)[:, None]
    flux = rt_values(mesh, dofmap, solution.rt_coeffs, points)
    grad = s1_gradients(mesh, dofmap, solution.s1_coeffs)[:, None, :]
    scalar = g1.values(mesh, points) + scheme.w1 * div
    vector = g2.values(mesh, points) + scheme.a * flux - scheme.b * grad
    integrand = c_f ** 2 * scalar ** 2 + np.sum(vector ** 2, axis=-1)
    return np.sum(weights * integrand, axis=1)


def grad_inf_norm(mesh: Mesh, dofmap: DofMap, solution: DiscreteSolution) -> float:
    _check_mesh(mesh, dofmap, solution)
    grads = s1_gradients(mesh, dofmap, solution.s1_coeffs)
    return float(np.linalg.norm(grads, axis=1).max(initial=0.0))


def doerfler_mark(squared_indicators, theta: float, tie_break: str = "ascending") -> MarkedSet:
    """Minimal set M with theta * sum(all) <= sum(M), largest indicators first.

    Equal indicators are taken in ascending element order.
    """
    values = np.asarray(squared_indicators, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("doerfler marking needs at least one indicator")
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"bulk parameter theta must lie in (0, 1] (got {theta})")
    if np.any(values < 0):
        raise ValueError("squared indicators must be nonnegative")
    if tie_break not in TIE_BREAKS:
        raise ValueError(f"unknown tie break '{tie_break}'")

    index = np.arange(values.size)
    secondary = index if tie_break == "ascending" else -index
    order = np.lexsort((secondary, -values))
    cumulative = np.cumsum(values[order])
    total = cumulative[-1]
    if total == 0.0:
        return np.zeros(0, dtype=np.int64)
    count = int(np.searchsorted(cumulative, theta * total, side="left")) + 1
    return np.sort(order[:min(count, values.size)])


def write_indicator_csv(path: str, eta: EstimatorReport, mu: EstimatorReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["element_index", "eta2", "mu2"])
        for i, (e2, m2) in enumerate(zip(eta.local.tolist(), mu.local.tolist())):
            writer.writerow([i, repr(e2), repr(m2)])


@dataclass(frozen=True)
class EmpiricalConstants:
    """reliability = |||ref - current||| / (eta + mu), efficiency = (eta + mu) / |||ref - prev|||."""

    reliability: float
    efficiency: float
    reference_dofs: int


def reliability_efficiency(mesh: Mesh, scheme: WeightedScheme, c_f: float, delta: float,
                           prev: DiscreteSolution, current: DiscreteSolution,
                           problem: ProblemSpec, levels: int = 2) -> EmpiricalConstants:
    """Compare eta_k + mu_k with the same step solved two uniform levels finer."""
    dofmap = build_dof_map(mesh)
    estimate = (eta_k(mesh, dofmap, scheme, c_f, delta, prev, current, problem).value
                + mu_k(mesh, dofmap, scheme, c_f, prev, current).value)

    fine = refine_uniform(mesh, levels)
    fine_dofmap = build_dof_map(fine)
    prev_fine = prolongate(prev, mesh, fine, fine_dofmap)
    current_fine = prolongate(current, mesh, fine, fine_dofmap)
    system = assemble_system(fine, fine_dofmap, scheme, c_f)
    rhs = assemble_zarantonello_rhs(fine, fine_dofmap, scheme, c_f, delta, prev_fine, problem)
    reference = solve(factorize(system), rhs)

    err_current = np.sqrt(max(system.quadratic_form(reference - current_fine.vector), 0.0))
    err_prev = np.sqrt(max(system.quadratic_form(reference - prev_fine.vector), 0.0))
    reliability = err_current / estimate if estimate > 0 else 0.0
    efficiency = estimate / err_prev if err_prev > 0 else 0.0
    log.info("empirical constants on %d reference dofs: reliability %.3g efficiency %.3g",
             fine_dofmap.n_dofs, reliability, efficiency)
    return EmpiricalConstants(float(reliability), float(efficiency), fine_dofmap.n_dofs)
