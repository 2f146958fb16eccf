"""Randomized property tests: norm equivalence, monotonicity, Doerfler minimality and NVB fuzzing."""

import itertools
import unittest

import numpy as np

from assembly import apply_operator_b, assemble_system, assemble_weighted_norm
from benchmarks import L_SHAPE_FRIEDRICHS, UNIT_SQUARE_FRIEDRICHS
from estimator import doerfler_mark, grad_inf_norm
from fem_space import DiscreteSolution, build_dof_map
from linear_solver import factorize, solve
from mesh import (check_conformity, check_nestedness, make_l_shape_initial, make_unit_square_initial,
                  min_angle, refine_nvb, refine_uniform)
from nonlinearity import SCHEMES, compute_weights, contraction_constants, convex_energy, forchheimer

SEED = 1337
SLACK = 1e-10


def _meshes():
    return [
        (refine_uniform(make_unit_square_initial(), 2), UNIT_SQUARE_FRIEDRICHS),
        (refine_uniform(make_l_shape_initial(), 1), L_SHAPE_FRIEDRICHS),
        (refine_nvb(refine_uniform(make_l_shape_initial(), 2), [0, 5, 11]), L_SHAPE_FRIEDRICHS),
    ]


class EquivalenceTests(unittest.TestCase):
    def test_random_pairs_within_bounds(self):
        rng = np.random.default_rng(SEED)
        for mesh, c_f in _meshes():
            dofmap = build_dof_map(mesh)
            for name in SCHEMES:
                weights = compute_weights(name, 2.0, 3.0)
                lower, upper = weights.equivalence_bounds()
                a = assemble_system(mesh, dofmap, weights, c_f).matrix
                w = assemble_weighted_norm(mesh, dofmap, weights, c_f)
                x = rng.normal(size=(500, dofmap.n_dofs)) * rng.uniform(0.01, 10.0, size=(500, 1))
                ratios = np.einsum("ij,ij->i", x, (a @ x.T).T) / np.einsum("ij,ij->i", x, (w @ x.T).T)
                with self.subTest(scheme=name, triangles=mesh.n_triangles):
                    self.assertGreaterEqual(ratios.min(), lower - SLACK)
                    self.assertLessEqual(ratios.max(), upper + SLACK)


class MonotonicityTests(unittest.TestCase):
    def _check(self, nl, name, rng, scale, pairs=200):
        mesh = refine_uniform(make_l_shape_initial(), 2)
        dofmap = build_dof_map(mesh)
        weights = compute_weights(name, nl.lambda1, nl.lambda2)
        constants = contraction_constants(name, nl.lambda1, nl.lambda2)
        system = assemble_system(mesh, dofmap, weights, L_SHAPE_FRIEDRICHS)
        fact = factorize(system)
        checked = 0
        for _ in range(pairs):
            x = DiscreteSolution.from_vector(dofmap, rng.normal(scale=scale, size=dofmap.n_dofs))
            y = DiscreteSolution.from_vector(dofmap, rng.normal(scale=scale, size=dofmap.n_dofs))
            if nl.grad_bound is not None and max(grad_inf_norm(mesh, dofmap, x),
                                                 grad_inf_norm(mesh, dofmap, y)) > nl.grad_bound:
                continue
            diff = x.vector - y.vector
            r = (apply_operator_b(mesh, dofmap, weights, L_SHAPE_FRIEDRICHS, x, nl)
                 - apply_operator_b(mesh, dofmap, weights, L_SHAPE_FRIEDRICHS, y, nl))
            norm_sq = system.quadratic_form(diff)
            self.assertGreaterEqual(float(r @ diff), (constants.alpha_ls - SLACK) * norm_sq)
            self.assertLessEqual(float(r @ solve(fact, r)), (constants.l_ls + SLACK) ** 2 * norm_sq)
            checked += 1
        self.assertGreater(checked, pairs // 2)

    def test_convex_energy(self):
        rng = np.random.default_rng(SEED)
        for name in SCHEMES:
            with self.subTest(scheme=name):
                self._check(convex_energy(), name, rng, scale=1.0)

    def test_forchheimer_inside_gradient_bound(self):
        self._check(forchheimer(), "emphasized-gradient", np.random.default_rng(SEED), scale=2e-4)


class DoerflerOracleTests(unittest.TestCase):
    def test_minimal_cardinality(self):
        rng = np.random.default_rng(SEED)
        for _ in range(300):
            n = int(rng.integers(1, 13))
            values = rng.choice([0.0, 0.5, 1.0, 2.0, 3.0], size=n) if rng.random() < 0.5 else rng.random(n)
            if values.sum() == 0:
                continue
            theta = float(rng.uniform(0.05, 1.0))
            marked = doerfler_mark(values, theta)
            target = theta * values.sum()
            best = max((values[list(s)].sum() for s in itertools.combinations(range(n), len(marked) - 1)),
                       default=0.0)
            with self.subTest(values=values.tolist(), theta=theta):
                self.assertGreaterEqual(values[marked].sum(), target * (1 - 1e-12))
                self.assertLess(best, target)
                rest = np.setdiff1d(np.arange(n), marked)
                if rest.size:
                    self.assertGreaterEqual(values[marked].min(), values[rest].max())


class RefinementFuzzTests(unittest.TestCase):
    def test_single_marks(self):
        rng = np.random.default_rng(SEED)
        mesh = make_l_shape_initial()
        floor = min_angle(mesh) - 1e-6
        for step in range(1000):
            fine = refine_nvb(mesh, [int(rng.integers(mesh.n_triangles))])
            with self.subTest(step=step):
                self.assertEqual(check_conformity(fine), [])
                self.assertEqual(check_nestedness(mesh, fine), [])
                self.assertGreaterEqual(min_angle(fine), floor)
                self.assertGreater(fine.n_triangles, mesh.n_triangles)
                self.assertAlmostEqual(fine.total_area(), 3.0, places=12)
            mesh = fine


if __name__ == "__main__":
    unittest.main()
