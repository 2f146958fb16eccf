"""Adaptive loops: least-squares FEM for linear data, and the adaptive Zarantonello iteration.

Solve, estimate, mark and refine, with nested iteration between outer steps
and one factorization per mesh.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from assembly import (LinearData, ProblemSpec, SparseSpdSystem, assemble_linear_ls_rhs,
                      assemble_system, assemble_zarantonello_rhs)
from estimator import (doerfler_mark, eta_k, grad_inf_norm, linear_eta, mu_k,
                       nonlinear_functional)
from fem_space import DiscreteSolution, DofMap, build_dof_map, prolongate
from linear_solver import Factorization, SolverStats, factorize, solve
from mesh import Mesh, refine_nvb, refine_uniform
from nonlinearity import SCHEMES, WeightedScheme, compute_weights, contraction_constants

log = logging.getLogger(__name__)

MARKINGS = ("doerfler", "uniform")
SOLVERS = ("direct", "cg")
UNIFORM_PASSES = 2
BUDGET_FLAG = "budget"


@dataclass
class AlgorithmParams:
    delta: float = 1.0
    gamma: float = 0.9
    theta: float = 0.3
    tau: float = 0.0
    max_total_dofs: int = 200000
    max_outer_iters: int = 60
    scheme: str = "emphasized-gradient"
    marking: str = "doerfler"
    solver: str = "direct"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive (got {self.delta})")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1) (got {self.gamma})")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must lie in (0, 1] (got {self.theta})")
        if self.tau < 0:
            raise ValueError(f"tau must be nonnegative (got {self.tau})")
        if self.max_total_dofs <= 0 or self.max_outer_iters <= 0:
            raise ValueError("budgets must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme '{self.scheme}'")
        if self.marking not in MARKINGS:
            raise ValueError(f"unknown marking '{self.marking}' (expected one of {', '.join(MARKINGS)})")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver '{self.solver}' (expected one of {', '.join(SOLVERS)})")


@dataclass
class RunRow:
    k: int
    ell: int
    n_elem: int
    n_rt: int
    n_s1: int
    eta: float
    mu: float
    N: float
    grad_inf: float
    marked: int
    accepted: bool
    wall_ms: float

    @property
    def n_dofs(self) -> int:
        return self.n_rt + self.n_s1

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    rows: List[RunRow] = field(default_factory=list)
    flag: str = ""
    factorizations: Dict[int, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def accepted_rows(self) -> List[RunRow]:
        return [row for row in self.rows if row.accepted]

    @property
    def last(self) -> Optional[RunRow]:
        return self.rows[-1] if self.rows else None


@dataclass
class LevelContext:
    """Everything computed on one (k, ell) level, handed to on_level callbacks."""

    k: int
    ell: int
    mesh: Mesh
    dofmap: DofMap
    system: SparseSpdSystem
    prev: Optional[DiscreteSolution]
    current: DiscreteSolution
    eta_local: np.ndarray
    mu_local: Optional[np.ndarray]
    accepted: bool


RowCallback = Optional[Callable[[RunRow], None]]
LevelCallback = Optional[Callable[[LevelContext], None]]


class _MeshState:
    """Mesh, DOF map, system and factorization of the current level."""

    def __init__(self, mesh: Mesh, scheme: WeightedScheme, c_f: float, solver: str, stats: SolverStats):
        self.scheme = scheme
        self.c_f = c_f
        self.solver = solver
        self.stats = stats
        self.load(mesh)

    def load(self, mesh: Mesh) -> None:
        self.mesh = mesh
        self.dofmap = build_dof_map(mesh)
        self.system = assemble_system(mesh, self.dofmap, self.scheme, self.c_f)
        self.fact = factorize(self.system, method=self.solver, stats=self.stats)


def zarantonello_step(mesh: Mesh, dofmap: DofMap, fact: Factorization, scheme: WeightedScheme,
                      c_f: float, delta: float, prev: DiscreteSolution, problem: ProblemSpec,
                      stats: Optional[SolverStats] = None) -> DiscreteSolution:
    """Discrete minimizer of Z_k: A(x, y) = A(prev, y) + delta [F(y) - B(prev; y)]."""
    if fact.mesh_uid != mesh.uid:
        raise ValueError(f"factorization of mesh {fact.mesh_uid} used on mesh {mesh.uid}")
    rhs = assemble_zarantonello_rhs(mesh, dofmap, scheme, c_f, delta, prev, problem)
    return DiscreteSolution.from_vector(dofmap, solve(fact, rhs, stats))


def _refine(mesh: Mesh, local: np.ndarray, params: AlgorithmParams) -> Tuple[Mesh, int]:
    if params.marking == "uniform":
        return refine_uniform(mesh, UNIFORM_PASSES), mesh.n_triangles
    marked = doerfler_mark(local, params.theta)
    return refine_nvb(mesh, marked), len(marked)


def _over_budget(mesh: Mesh, params: AlgorithmParams) -> bool:
    dofs = mesh.n_edges + int(np.count_nonzero(~mesh.boundary_vertex_flags))
    return dofs > params.max_total_dofs


def run_adaptive_zarantonello(problem: ProblemSpec, params: AlgorithmParams,
                              on_row: RowCallback = None, on_level: LevelCallback = None,
                              initial_mesh: Optional[Mesh] = None) -> RunRecord:
    """Outer Zarantonello steps k, inner adaptive levels ell until eta_k <= gamma^k."""
    nl = problem.nonlinearity
    scheme = compute_weights(params.scheme, nl.lambda1, nl.lambda2)
    constants = contraction_constants(params.scheme, nl.lambda1, nl.lambda2)
    rho = constants.rho_z(params.delta)
    record = RunRecord(meta={
        "scheme": scheme.scheme, "w1_sq": scheme.w1_sq, "a": scheme.a, "b": scheme.b,
        "alpha_ls": constants.alpha_ls, "l_ls": constants.l_ls,
        "delta_star": constants.delta_star, "rho_z": rho,
    })
    log.info("zarantonello run: %s, delta=%g (delta*=%.4g, rho_z=%.6f), gamma=%g, theta=%g",
             scheme.scheme, params.delta, constants.delta_star, rho, params.gamma, params.theta)

    stats = SolverStats()
    mesh = initial_mesh if initial_mesh is not None else problem.initial_mesh()
    state = _MeshState(mesh, scheme, problem.c_f, params.solver, stats)
    prev = DiscreteSolution.zeros(state.dofmap)

    for k in range(1, params.max_outer_iters + 1):
        ell = 0
        while True:
            started = time.perf_counter()
            current = zarantonello_step(state.mesh, state.dofmap, state.fact, scheme, problem.c_f,
                                        params.delta, prev, problem, stats)
            eta = eta_k(state.mesh, state.dofmap, scheme, problem.c_f, params.delta, prev, current, problem)
            mu = mu_k(state.mesh, state.dofmap, scheme, problem.c_f, prev, current)
            functional = nonlinear_functional(state.mesh, state.dofmap, problem, problem.c_f, current)
            grad_inf = grad_inf_norm(state.mesh, state.dofmap, current)
            if nl.grad_bound is not None and grad_inf > nl.grad_bound:
                log.warning("k=%d ell=%d: |grad u|_inf = %.3e exceeds the bound %.3e",
                            k, ell, grad_inf, nl.grad_bound)
            accepted = eta.value <= params.gamma ** k

            fine, marked = (None, 0) if accepted else _refine(state.mesh, eta.local, params)
            row = RunRow(k, ell, state.mesh.n_triangles, state.dofmap.n_rt, state.dofmap.n_s1,
                         eta.value, mu.value, functional.value, grad_inf, marked, accepted,
                         1e3 * (time.perf_counter() - started))
            record.rows.append(row)
            log.info("k=%d ell=%d dofs=%d eta=%.4e mu=%.4e N=%.4e%s", k, ell, row.n_dofs,
                     row.eta, row.mu, row.N, " accepted" if accepted else "")
            if on_level is not None:
                on_level(LevelContext(k, ell, state.mesh, state.dofmap, state.system, prev, current,
                                      eta.local, mu.local, accepted))
            if on_row is not None:
                on_row(row)

            if accepted:
                prev = current
                break
            if _over_budget(fine, params):
                record.flag = BUDGET_FLAG
                record.meta["budget"] = "dof"
                log.info("dof budget %d reached at k=%d ell=%d", params.max_total_dofs, k, ell)
                record.factorizations = dict(stats.factorizations)
                return record
            coarse = state.mesh
            state.load(fine)
            prev = prolongate(prev, coarse, fine, state.dofmap)
            ell += 1

    record.flag = BUDGET_FLAG
    record.meta["budget"] = "outer iteration"
    log.info("outer iteration budget %d reached", params.max_outer_iters)
    record.factorizations = dict(stats.factorizations)
    return record


def run_alsfem_linear(data: LinearData, scheme: WeightedScheme, params: AlgorithmParams,
                      on_row: RowCallback = None, on_level: LevelCallback = None,
                      initial_mesh: Optional[Mesh] = None) -> RunRecord:
    """Solve, estimate, stop if eta <= tau, mark, refine."""
    record = RunRecord(meta={"scheme": scheme.scheme, "w1_sq": scheme.w1_sq,
                             "a": scheme.a, "b": scheme.b, "tau": params.tau})
    stats = SolverStats()
    mesh = initial_mesh if initial_mesh is not None else data.initial_mesh()
    state = _MeshState(mesh, scheme, data.c_f, params.solver, stats)

    ell = 0
    while True:
        started = time.perf_counter()
        rhs = assemble_linear_ls_rhs(state.mesh, state.dofmap, scheme, data.c_f, data.g1, data.g2,
                                     data.source_degree)
        current = DiscreteSolution.from_vector(state.dofmap, solve(state.fact, rhs, stats))
        eta = linear_eta(state.mesh, state.dofmap, scheme, data.c_f, data.g1, data.g2, current,
                         data.source_degree)
        grad_inf = grad_inf_norm(state.mesh, state.dofmap, current)
        accepted = eta.value <= params.tau

        fine, marked = (None, 0) if accepted else _refine(state.mesh, eta.local, params)
        row = RunRow(0, ell, state.mesh.n_triangles, state.dofmap.n_rt, state.dofmap.n_s1,
                     eta.value, 0.0, eta.value, grad_inf, marked, accepted,
                     1e3 * (time.perf_counter() - started))
        record.rows.append(row)
        log.info("ell=%d dofs=%d eta=%.4e%s", ell, row.n_dofs, row.eta, " accepted" if accepted else "")
        if on_level is not None:
            on_level(LevelContext(0, ell, state.mesh, state.dofmap, state.system, None, current,
                                  eta.local, None, accepted))
        if on_row is not None:
            on_row(row)

        if accepted:
            break
        if _over_budget(fine, params):
            record.flag = BUDGET_FLAG
            record.meta["budget"] = "dof"
            log.info("dof budget %d reached at ell=%d", params.max_total_dofs, ell)
            break
        state.load(fine)
        ell += 1

    record.factorizations = dict(stats.factorizations)
    return record


def estimate_contraction(rows: List[RunRow], k_min: int = 5) -> Tuple[float, float]:
    """Fit eta_k + mu_k <= C rho^k over accepted rows with k >= k_min; returns (C, rho)."""
    pts = [(row.k, row.eta + row.mu) for row in rows if row.accepted and row.k >= k_min
           and row.eta + row.mu > 0]
    if len(pts) < 2:
        raise ValueError("need at least two accepted iterates to fit a contraction ratio")
    ks, values = np.array(pts).T
    slope, intercept = np.polyfit(ks, np.log(values), 1)
    return float(np.exp(intercept)), float(np.exp(slope))


def convergence_slope(rows: List[RunRow], decades: float = 1.0) -> float:
    """Log-log slope of accepted eta + mu against DOFs over the last decades."""
    pts = [(row.n_dofs, row.eta + row.mu) for row in rows if row.accepted and row.eta + row.mu > 0]
    if len(pts) < 2:
        pts = [(row.n_dofs, row.eta + row.mu) for row in rows if row.eta + row.mu > 0]
    if len(pts) < 2:
        raise ValueError("need at least two rows to fit a convergence slope")
    dofs, values = np.array(pts).T
    tail = dofs >= dofs.max() / 10.0 ** decades
    if np.count_nonzero(tail) >= 2 and np.unique(dofs[tail]).size >= 2:
        dofs, values = dofs[tail], values[tail]
    slope, _ = np.polyfit(np.log(dofs), np.log(values), 1)
    return float(slope)
