"""Fast invariant suite with optional fault injection."""

import itertools
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import eigh

from assembly import apply_operator_b, assemble_system, assemble_weighted_norm
from benchmarks import L_SHAPE_FRIEDRICHS, UNIT_SQUARE_FRIEDRICHS, convex_energy_problem
from driver import zarantonello_step
from estimator import doerfler_mark, eta_k
from fem_space import DiscreteSolution, build_dof_map
from linear_solver import factorize, solve
from mesh import (check_conformity, check_nestedness, make_l_shape_initial, make_unit_square_initial,
                  min_angle, refine_nvb, refine_uniform)
from nonlinearity import SCHEMES, WeightedScheme, compute_weights, contraction_constants, convex_energy

log = logging.getLogger(__name__)

INJECTIONS = ("halve-w1", "reverse-ties")
SLACK = 1e-10


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0


@dataclass
class SelfcheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.ok]

    @property
    def ok(self) -> bool:
        return not self.failures


def _weights(scheme: str, lambda1: float, lambda2: float, inject: Optional[str]) -> WeightedScheme:
    weights = compute_weights(scheme, lambda1, lambda2)
    if inject == "halve-w1":
        weights = replace(weights, w1_sq=weights.w1_sq / 4.0)
    return weights


def check_conformity_fuzz(rng: np.random.Generator, steps: int = 40, max_triangles: int = 3000) -> str:
    """Random marks on the L-shape; every mesh conforming, nested, angles bounded below."""
    mesh = make_l_shape_initial()
    floor = min_angle(mesh) - 1e-6
    for step in range(steps):
        n_mark = max(1, int(rng.integers(1, max(2, mesh.n_triangles // 4 + 1))))
        if mesh.n_triangles > max_triangles:
            n_mark = 1
        marked = rng.choice(mesh.n_triangles, size=min(n_mark, mesh.n_triangles), replace=False)
        fine = refine_nvb(mesh, marked)
        problems = check_conformity(fine) + check_nestedness(mesh, fine)
        if problems:
            raise AssertionError(f"step {step}: {problems[0]}")
        angle = min_angle(fine)
        if angle < floor:
            raise AssertionError(f"step {step}: min angle {angle:.4f} below {floor:.4f}")
        mesh = fine
    return f"{steps} steps, {mesh.n_triangles} triangles"


def check_equivalence(inject: Optional[str] = None, lambdas: Tuple[float, float] = (2.0, 3.0),
                      passes: Tuple[int, ...] = (2, 3)) -> str:
    """Generalized eigenvalues of (A, W) lie within the scheme's equivalence bounds."""
    c_f = UNIT_SQUARE_FRIEDRICHS
    worst = []
    for name in SCHEMES:
        lower, upper = compute_weights(name, *lambdas).equivalence_bounds()
        weights = _weights(name, *lambdas, inject)
        for n in passes:
            mesh = refine_uniform(make_unit_square_initial(), n)
            dofmap = build_dof_map(mesh)
            a = assemble_system(mesh, dofmap, weights, c_f).matrix.toarray()
            w = assemble_weighted_norm(mesh, dofmap, weights, c_f).toarray()
            ratios = eigh(a, w, eigvals_only=True)
            lo, hi = float(ratios.min()), float(ratios.max())
            if lo < lower - SLACK or hi > upper + SLACK:
                raise AssertionError(f"{name} on {mesh.n_triangles} triangles: ratios [{lo:.4f}, {hi:.4f}] "
                                     f"outside [{lower:.4f}, {upper:.4f}]")
            worst.append(lo / lower)
    return f"min ratio / lower bound = {min(worst):.3f}"


def check_monotonicity(rng: np.random.Generator, samples: int = 50) -> str:
    """<B(x) - B(y), x - y> >= alpha |||x - y|||^2 and |B(x) - B(y)|_* <= L |||x - y|||."""
    nl = convex_energy()
    mesh = refine_uniform(make_l_shape_initial(), 2)
    dofmap = build_dof_map(mesh)
    c_f = L_SHAPE_FRIEDRICHS
    summary = []
    for name in SCHEMES:
        weights = compute_weights(name, nl.lambda1, nl.lambda2)
        constants = contraction_constants(name, nl.lambda1, nl.lambda2)
        system = assemble_system(mesh, dofmap, weights, c_f)
        fact = factorize(system)
        low, high = np.inf, 0.0
        for _ in range(samples):
            x = DiscreteSolution.from_vector(dofmap, rng.normal(scale=rng.uniform(0.1, 3.0), size=dofmap.n_dofs))
            y = DiscreteSolution.from_vector(dofmap, rng.normal(scale=rng.uniform(0.1, 3.0), size=dofmap.n_dofs))
            diff = x.vector - y.vector
            r = (apply_operator_b(mesh, dofmap, weights, c_f, x, nl)
                 - apply_operator_b(mesh, dofmap, weights, c_f, y, nl))
            norm_sq = system.quadratic_form(diff)
            dual_sq = float(r @ solve(fact, r))
            mono = float(r @ diff) / norm_sq
            lip = np.sqrt(dual_sq / norm_sq)
            if mono < constants.alpha_ls - SLACK or lip > constants.l_ls + SLACK:
                raise AssertionError(f"{name}: monotonicity {mono:.4g} (alpha {constants.alpha_ls:.4g}), "
                                     f"lipschitz {lip:.4g} (L {constants.l_ls:.4g})")
            low, high = min(low, mono), max(high, lip)
        summary.append(f"{name} {low:.3g}/{high:.3g}")
    return ", ".join(summary)


def check_pythagoras(rng: np.random.Generator, samples: int = 20) -> str:
    """Z_k(q) - Z_k(x_h) = |||q - x_h|||_A^2 for the discrete minimizer x_h."""
    problem = convex_energy_problem()
    nl = problem.nonlinearity
    weights = compute_weights("emphasized-gradient", nl.lambda1, nl.lambda2)
    mesh = refine_uniform(problem.initial_mesh(), 2)
    dofmap = build_dof_map(mesh)
    system = assemble_system(mesh, dofmap, weights, problem.c_f)
    fact = factorize(system)
    prev = DiscreteSolution.from_vector(dofmap, rng.normal(scale=0.1, size=dofmap.n_dofs))
    delta = 0.5
    x_h = zarantonello_step(mesh, dofmap, fact, weights, problem.c_f, delta, prev, problem)
    z_min = eta_k(mesh, dofmap, weights, problem.c_f, delta, prev, x_h, problem).total
    worst = 0.0
    for _ in range(samples):
        q = DiscreteSolution.from_vector(dofmap, x_h.vector + rng.normal(scale=0.05, size=dofmap.n_dofs))
        z_q = eta_k(mesh, dofmap, weights, problem.c_f, delta, prev, q, problem).total
        expected = system.quadratic_form(q.vector - x_h.vector)
        rel = abs((z_q - z_min) - expected) / max(expected, 1e-300)
        if rel > 1e-9:
            raise AssertionError(f"Z_k gap {z_q - z_min:.6e} vs |||q - x_h|||^2 {expected:.6e}")
        worst = max(worst, rel)
    return f"max relative gap {worst:.2e}"


def _min_cardinality(values: np.ndarray, theta: float) -> int:
    target = theta * values.sum()
    for size in range(len(values) + 1):
        for subset in itertools.combinations(range(len(values)), size):
            if values[list(subset)].sum() >= target:
                return size
    return len(values)


def check_doerfler(rng: np.random.Generator, inject: Optional[str] = None, cases: int = 200) -> str:
    """Minimal cardinality, dominance and ascending-index ties against brute force."""
    tie_break = "descending" if inject == "reverse-ties" else "ascending"
    instances = [(np.array([3.0, 3.0, 3.0, 1.0]), 0.5)]
    for _ in range(cases):
        n = int(rng.integers(1, 11))
        instances.append((rng.integers(0, 6, size=n).astype(float), float(rng.choice([0.2, 0.3, 0.5, 0.6, 0.8, 1.0]))))
    for values, theta in instances:
        if values.sum() == 0:
            continue
        marked = doerfler_mark(values, theta, tie_break=tie_break)
        expected = _min_cardinality(values, theta)
        if len(marked) != expected:
            raise AssertionError(f"{values.tolist()} theta={theta}: marked {len(marked)}, minimum {expected}")
        rest = np.setdiff1d(np.arange(len(values)), marked)
        if rest.size and values[marked].min() < values[rest].max():
            raise AssertionError(f"{values.tolist()} theta={theta}: marked set not dominant")
        cut = values[marked].min()
        tied = np.flatnonzero(values == cut)
        taken = np.intersect1d(tied, marked)
        if not np.array_equal(taken, tied[:len(taken)]):
            raise AssertionError(f"{values.tolist()} theta={theta}: ties at {cut} resolved to {taken.tolist()}")
    return f"{len(instances)} instances"


def run_selfcheck(seed: int = 0, inject: Optional[str] = None,
                  progress: Optional[Callable[[CheckResult], None]] = None) -> SelfcheckReport:
    if inject is not None and inject not in INJECTIONS:
        raise ValueError(f"unknown injection '{inject}' (expected one of {', '.join(INJECTIONS)})")
    rng = np.random.default_rng(seed)
    checks = [
        ("conformity fuzz", lambda: check_conformity_fuzz(rng)),
        ("fundamental equivalence", lambda: check_equivalence(inject)),
        ("monotonicity and lipschitz", lambda: check_monotonicity(rng)),
        ("pythagoras and minimality", lambda: check_pythagoras(rng)),
        ("doerfler oracle", lambda: check_doerfler(rng, inject)),
    ]
    report = SelfcheckReport()
    for name, check in checks:
        started = time.perf_counter()
        try:
            result = CheckResult(name, True, check())
        except AssertionError as e:
            result = CheckResult(name, False, str(e))
        result.seconds = time.perf_counter() - started
        log.info("%s: %s (%.2f s)", name, "ok" if result.ok else "FAILED", result.seconds)
        report.results.append(result)
        if progress is not None:
            progress(result)
    return report
