"""Unit tests for flux laws, weighting schemes and contraction constants."""

import math
import unittest

import numpy as np

import nonlinearity
from nonlinearity import (SCHEMES, compute_weights, contraction_constants, convex_energy, dsigma,
                          forchheimer, linear_identity, make_nonlinearity, sigma)


class FluxLawTests(unittest.TestCase):
    def test_convex_energy_sigma(self):
        nl = convex_energy()
        np.testing.assert_allclose(sigma(nl, [3.0, 4.0]), (2.0 + 1.0 / 6.0) * np.array([3.0, 4.0]))
        np.testing.assert_allclose(sigma(nl, [0.0, 0.0]), [0.0, 0.0])
        self.assertEqual((nl.lambda1, nl.lambda2), (2.0, 3.0))

    def test_linear_identity(self):
        nl = linear_identity()
        xi = np.array([[1.0, -2.0], [0.5, 0.25]])
        np.testing.assert_allclose(nl.sigma(xi), xi)
        np.testing.assert_allclose(nl.dsigma(xi), np.broadcast_to(np.eye(2), (2, 2, 2)))

    def test_forchheimer_constants(self):
        nl = forchheimer()
        root = math.sqrt(0.2 ** 2 + 20.0 * 1e-2)
        self.assertAlmostEqual(nl.lambda1, 0.4 / ((0.2 + root) * root))
        self.assertAlmostEqual(nl.lambda2, 5.0)
        self.assertAlmostEqual(float(nl.phi(np.array(0.0))), 5.0)

    def test_forchheimer_validation(self):
        with self.assertRaises(ValueError):
            forchheimer(k1=0.0)
        with self.assertRaises(ValueError):
            forchheimer(grad_bound=-1.0)

    def test_make_nonlinearity(self):
        self.assertEqual(make_nonlinearity("forchheimer", k1=0.5).k1, 0.5)
        with self.assertRaises(ValueError):
            make_nonlinearity("p-laplace")

    def test_dsigma_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for nl in (convex_energy(), forchheimer()):
            for _ in range(20):
                xi = rng.normal(scale=0.01 if nl.kind == "forchheimer" else 1.0, size=2)
                h = 1e-7 * max(1.0, np.linalg.norm(xi))
                fd = np.column_stack([(nl.sigma(xi + h * e) - nl.sigma(xi - h * e)) / (2 * h)
                                      for e in np.eye(2)])
                with self.subTest(kind=nl.kind, xi=xi.tolist()):
                    np.testing.assert_allclose(dsigma(nl, xi), fd, rtol=1e-5, atol=1e-6)

    def test_dsigma_spectrum_within_lambdas(self):
        rng = np.random.default_rng(5)
        cases = [(convex_energy(), rng.normal(scale=3.0, size=(200, 2))),
                 (forchheimer(), rng.uniform(-1, 1, size=(200, 2)) * 0.007)]
        for nl, xi in cases:
            eig = np.linalg.eigvalsh(nl.dsigma(xi))
            with self.subTest(kind=nl.kind):
                self.assertTrue(np.all(eig >= nl.lambda1 - 1e-12))
                self.assertTrue(np.all(eig <= nl.lambda2 + 1e-12))

    def test_dsigma_at_zero(self):
        nl = convex_energy()
        np.testing.assert_allclose(nl.dsigma([0.0, 0.0]), 3.0 * np.eye(2))


class WeightTests(unittest.TestCase):
    def test_emphasized_gradient_values(self):
        w = compute_weights("emphasized-gradient", 2.0, 3.0)
        self.assertEqual(w.w1_sq, 4.5)
        self.assertEqual(w.b, 4.5)
        self.assertEqual(w.a, 1.0)

    def test_forchheimer_weights(self):
        nl = forchheimer()
        w = compute_weights("emphasized-gradient", nl.lambda1, nl.lambda2)
        self.assertAlmostEqual(w.w1_sq, 35.6969, delta=1e-3)
        self.assertAlmostEqual(w.b, 21.1237, delta=1e-3)

    def test_scheme_placements(self):
        l1, l2 = 2.0, 3.0
        o2 = l2 / math.sqrt(l1)
        expected = {
            "emphasized-gradient": (2 * o2 ** 2 / l1, 1.0, o2 ** 2),
            "balanced": (2 * o2 / l1, 1 / o2, o2),
            "downscaled-flux": (2 / l1, 1 / o2 ** 2, 1.0),
            "split": (2 * l2 ** 2 / l1, l1, l2 ** 2),
        }
        for scheme in SCHEMES:
            w = compute_weights(scheme, l1, l2)
            with self.subTest(scheme=scheme):
                np.testing.assert_allclose((w.w1_sq, w.a, w.b), expected[scheme])
                self.assertAlmostEqual(w.omega2, o2)
                self.assertAlmostEqual(w.w1 ** 2, w.w1_sq)

    def test_equivalence_bounds(self):
        lower, upper = compute_weights("emphasized-gradient", 2.0, 3.0).equivalence_bounds()
        self.assertEqual((lower, upper), (0.5, 2.0))
        for scheme in SCHEMES:
            lower, upper = compute_weights(scheme, 0.1, 10.0).equivalence_bounds()
            with self.subTest(scheme=scheme):
                self.assertGreater(lower, 0.0)
                self.assertLessEqual(lower, 0.5)

    def test_invalid_parameters(self):
        with self.assertRaises(ValueError):
            compute_weights("emphasized-gradient", 3.0, 2.0)
        with self.assertRaises(ValueError):
            compute_weights("emphasized-gradient", 0.0, 2.0)
        with self.assertRaises(ValueError):
            compute_weights("weighted", 1.0, 2.0)
        with self.assertRaises(ValueError):
            contraction_constants("weighted", 1.0, 2.0)


class ContractionTests(unittest.TestCase):
    def test_delta_star(self):
        c = contraction_constants("emphasized-gradient", 2.0, 3.0)
        self.assertAlmostEqual(c.alpha_ls, 1.0 / 18.0)
        self.assertAlmostEqual(c.l_ls, 8.0)
        self.assertAlmostEqual(c.delta_star, 1.0 / 576.0, places=15)

    def test_rho_in_range(self):
        for scheme in SCHEMES:
            c = contraction_constants(scheme, 2.0, 3.0)
            with self.subTest(scheme=scheme):
                self.assertGreater(c.alpha_ls, 0.0)
                self.assertLessEqual(c.alpha_ls, c.l_ls)
                rho = c.rho_z(0.5 * c.delta_star)
                self.assertGreater(rho, 0.0)
                self.assertLess(rho, 1.0)
                best = c.rho_z(c.alpha_ls / c.l_ls ** 2)
                self.assertAlmostEqual(best, math.sqrt(1 - (c.alpha_ls / c.l_ls) ** 2))

    def test_rho_out_of_range_warns(self):
        c = contraction_constants("emphasized-gradient", 2.0, 3.0)
        with self.assertLogs(nonlinearity.log, level="WARNING") as cm:
            rho = c.rho_z(1.0)
        self.assertLess(rho, 1.0)
        self.assertTrue(any("no contraction guarantee" in line for line in cm.output))
        self.assertFalse(c.in_range(0.0))
        self.assertTrue(c.in_range(1e-4))


if __name__ == "__main__":
    unittest.main()
