"""Tests for benchmark configuration, problems, CSV output, sweeps and the long reproductions."""

import csv
import glob
import json
import math
import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

import benchmarks
from assembly import BoxIndicator
from benchmarks import (BENCHMARKS, CSV_COLUMNS, L_SHAPE_FRIEDRICHS,
                        BenchmarkConfig, ConfigError, CsvSink, config_from_dict, load_config,
                        make_problem, manufactured_data, parse_sweep_values, porous_media_problem,
                        reduction_factor, run_benchmark, sweep, sweep_output_path, threads_from_env)
from driver import RunRecord, RunRow, convergence_slope, estimate_contraction, run_adaptive_zarantonello
from estimator import eta_k
from fem_space import DiscreteSolution, read_solution
from mesh import make_unit_square_initial
from nonlinearity import compute_weights

from tests.bench_test_config import BUDGET, DELTA_BUDGET, DELTA_VALUES, LONG, SCHEME_BUDGET


def _row(k, ell, accepted, eta=0.5, n=24):
    return RunRow(k, ell, n, 2 * n, n // 2, eta, 0.25, 1.5, 0.0, 0 if accepted else 3, accepted, 12.3456)


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


class ConfigTests(unittest.TestCase):
    def test_defaults(self):
        config = config_from_dict({"benchmark": "convex-energy"})
        self.assertEqual((config.delta, config.gamma, config.theta), (1.0, 0.9, 0.3))
        self.assertEqual(config.max_total_dofs, 200000)
        self.assertEqual(config.friedrichs, L_SHAPE_FRIEDRICHS)
        self.assertEqual(config.flux_sign, 1.0)
        self.assertEqual(config.params().scheme, "emphasized-gradient")

    def test_friedrichs_per_benchmark(self):
        self.assertAlmostEqual(BenchmarkConfig("linear-manufactured").friedrichs, 1.0 / (math.sqrt(2) * math.pi))
        self.assertEqual(BenchmarkConfig("porous-media", c_f=0.5).friedrichs, 0.5)
        self.assertEqual(BenchmarkConfig("porous-media").flux_sign, -1.0)

    def test_rejects(self):
        bad = [
            [],
            {},
            {"benchmark": "p-laplace"},
            {"benchmark": "convex-energy", "omega": 1},
            {"benchmark": "convex-energy", "scheme": "weighted"},
            {"benchmark": "convex-energy", "gamma": 1.0},
            {"benchmark": "convex-energy", "theta": 0},
            {"benchmark": "convex-energy", "delta": "fast"},
            {"benchmark": "convex-energy", "marking": "maximum"},
            {"benchmark": "convex-energy", "solver": "gmres"},
            {"benchmark": "convex-energy", "source_quadrature_degree": 7},
            {"benchmark": "convex-energy", "c_f": -1.0},
        ]
        for data in bad:
            with self.subTest(data=data):
                with self.assertRaises(ConfigError):
                    config_from_dict(data)

    def test_config_error_is_value_error(self):
        self.assertTrue(issubclass(ConfigError, ValueError))

    def test_load_config(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "c.json")
            with open(path, "w", encoding="utf-8") as handle:
                json.dump({"benchmark": "porous-media", "theta": 0.5}, handle)
            config = load_config(path)
            with self.assertRaises(OSError):
                load_config(os.path.join(tmp, "missing.json"))
        self.assertEqual((config.benchmark, config.theta), ("porous-media", 0.5))


class ProblemTests(unittest.TestCase):
    def test_make_problem(self):
        for name in BENCHMARKS:
            with self.subTest(benchmark=name):
                problem = make_problem(BenchmarkConfig(name))
                self.assertTrue(problem.c_f > 0)

    def test_porous_media(self):
        problem = porous_media_problem()
        self.assertIsInstance(problem.f1, BoxIndicator)
        self.assertEqual(problem.nonlinearity.kind, "forchheimer")
        self.assertEqual(problem.initial_mesh().n_triangles, 48)
        # f1 = +f: the source integrates to the box area
        mesh = problem.initial_mesh()
        self.assertAlmostEqual(float(problem.f1.moments(mesh).integral.sum()), 0.04)

    def test_manufactured_data_is_exact(self):
        rng = np.random.default_rng(8)
        mesh = make_unit_square_initial()
        points = rng.uniform(0.0, 1.0, size=(2, 5, 2))
        for name in ("emphasized-gradient", "split"):
            scheme = compute_weights(name, 1.0, 1.0)
            data = manufactured_data(scheme)
            u = data.exact_u(points)
            flux = data.exact_flux(points)
            div = -2.0 * np.pi ** 2 * u
            with self.subTest(scheme=name):
                np.testing.assert_allclose(data.g1.values(mesh, points) + scheme.w1 * div, 0.0, atol=1e-12)
                residual = data.g2.values(mesh, points) + scheme.a * flux - scheme.b * flux
                np.testing.assert_allclose(residual, 0.0, atol=1e-12)


class CsvSinkTests(unittest.TestCase):
    def test_flag_on_last_row(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "nested", "run.csv")
            sink = CsvSink(path, BenchmarkConfig("convex-energy"))
            for row in (_row(1, 0, False), _row(1, 1, True), _row(2, 0, False)):
                sink(row)
            sink.close("budget")
            rows = _read_csv(path)
        self.assertEqual(rows[0], CSV_COLUMNS)
        self.assertEqual(len(rows), 4)
        self.assertEqual([r[-1] for r in rows[1:]], ["", "", "budget"])
        first = dict(zip(CSV_COLUMNS, rows[1]))
        self.assertEqual(first["accepted"], "0")
        self.assertEqual(first["delta"], "1.0")
        self.assertEqual(first["eta"], "0.5")
        self.assertEqual(first["wall_ms"], "12.346")
        self.assertEqual(dict(zip(CSV_COLUMNS, rows[2]))["accepted"], "1")

    def test_wall_time_disabled(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.csv")
            sink = CsvSink(path, BenchmarkConfig("convex-energy", record_wall_time=False))
            sink(_row(1, 0, True))
            sink.close()
            rows = _read_csv(path)
        self.assertEqual(dict(zip(CSV_COLUMNS, rows[1]))["wall_ms"], "0")
        self.assertEqual(rows[1][-1], "")

    def test_empty_run(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.csv")
            CsvSink(path, BenchmarkConfig("convex-energy")).close("budget")
            self.assertEqual(_read_csv(path), [CSV_COLUMNS])


class RunBenchmarkTests(unittest.TestCase):
    def test_reruns_are_byte_identical(self):
        config = BenchmarkConfig("convex-energy", max_total_dofs=300, record_wall_time=False)
        with tempfile.TemporaryDirectory() as tmp:
            paths = [os.path.join(tmp, f"run{i}.csv") for i in range(2)]
            for path in paths:
                result = run_benchmark(config, path)
                self.assertEqual(result.status, 0)
            with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
                self.assertEqual(a.read(), b.read())
            rows = _read_csv(paths[0])
        self.assertEqual(rows[-1][-1], "budget")
        self.assertEqual(len(rows) - 1, len(result.record.rows))

    def test_no_output(self):
        result = run_benchmark(BenchmarkConfig("convex-energy", max_total_dofs=150))
        self.assertIsNone(result.output)
        self.assertTrue(result.record.rows)

    def test_dumps(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = BenchmarkConfig("porous-media", max_total_dofs=400, gamma=0.5,
                                     indicator_dump=os.path.join(tmp, "ind"),
                                     solution_dump=os.path.join(tmp, "sol"),
                                     mesh_dump=os.path.join(tmp, "mesh"))
            record = run_benchmark(config).record
            indicators = sorted(glob.glob(os.path.join(tmp, "ind", "indicators_*.csv")))
            meshes = glob.glob(os.path.join(tmp, "mesh", "mesh_*.off"))
            solutions = sorted(glob.glob(os.path.join(tmp, "sol", "solution_*.txt")))
            header = _read_csv(indicators[0])[0]
            self.assertEqual(len(indicators), len(record.rows))
            self.assertEqual(len(meshes), len(record.rows))
            self.assertEqual(len(solutions), len(record.accepted_rows()))
            self.assertTrue(os.path.basename(indicators[0]).startswith("indicators_k001_l000"))
            if solutions:
                k, ell, sol = read_solution(solutions[0])
                self.assertEqual(k, 1)
                self.assertEqual(len(sol.rt_coeffs) + len(sol.s1_coeffs), record.accepted_rows()[0].n_dofs)
        self.assertEqual(header, ["element_index", "eta2", "mu2"])

    def test_porous_gradient_stays_bounded(self):
        record = run_benchmark(BenchmarkConfig("porous-media", max_total_dofs=1500)).record
        self.assertTrue(all(row.grad_inf <= 1e-2 for row in record.rows))

    def test_pythagoras_on_every_level(self):
        rng = np.random.default_rng(21)
        config = BenchmarkConfig("convex-energy", delta=0.5, gamma=0.6, max_total_dofs=300)
        problem = make_problem(config)
        nl = problem.nonlinearity
        scheme = compute_weights(config.scheme, nl.lambda1, nl.lambda2)
        seen = []

        def check(ctx):
            z_min = eta_k(ctx.mesh, ctx.dofmap, scheme, problem.c_f, config.delta, ctx.prev,
                          ctx.current, problem).total
            for _ in range(20):
                shift = rng.normal(scale=0.05, size=ctx.dofmap.n_dofs)
                q = DiscreteSolution.from_vector(ctx.dofmap, ctx.current.vector + shift)
                z_q = eta_k(ctx.mesh, ctx.dofmap, scheme, problem.c_f, config.delta, ctx.prev, q, problem).total
                expected = ctx.system.quadratic_form(shift)
                seen.append(abs((z_q - z_min) - expected) / expected)

        run_adaptive_zarantonello(problem, config.params(), on_level=check)
        self.assertTrue(seen)
        self.assertLessEqual(max(seen), 1e-7)

    def test_small_gamma_refines_more_per_step(self):
        def rows_per_step(gamma):
            record = run_benchmark(BenchmarkConfig("convex-energy", gamma=gamma, max_total_dofs=2000)).record
            return len(record.rows) / len({row.k for row in record.rows})

        self.assertGreater(rows_per_step(0.1), rows_per_step(0.9))

    def test_linear_manufactured_rate(self):
        config = BenchmarkConfig("linear-manufactured", marking="uniform", max_total_dofs=5000)
        rows = run_benchmark(config).record.rows
        self.assertGreaterEqual(len(rows), 5)
        for before, after in zip(rows[-3:], rows[-2:]):
            self.assertAlmostEqual(before.eta / after.eta, 2.0, delta=0.15)


class SweepTests(unittest.TestCase):
    def test_parse_sweep_values(self):
        self.assertEqual(parse_sweep_values("delta", "0.01, 0.5,1"), [0.01, 0.5, 1.0])
        self.assertEqual(parse_sweep_values("scheme", "balanced,split"), ["balanced", "split"])
        for param, text in (("omega", "1"), ("delta", " , "), ("gamma", "0.5,x")):
            with self.subTest(param=param, text=text):
                with self.assertRaises(ConfigError):
                    parse_sweep_values(param, text)

    def test_output_path(self):
        path = sweep_output_path("runs", BenchmarkConfig("convex-energy"), "delta", 0.5)
        self.assertEqual(path, os.path.join("runs", "convex-energy_delta-0.5.csv"))

    def test_parallel_matches_sequential(self):
        config = BenchmarkConfig("convex-energy", max_total_dofs=300, record_wall_time=False)
        values = [0.3, 0.5, 0.7]
        with tempfile.TemporaryDirectory() as tmp:
            sequential = sweep(config, "theta", values, os.path.join(tmp, "seq"))
            parallel = sweep(config, "theta", values, os.path.join(tmp, "par"), parallel=True, max_workers=3)
            for value in values:
                with open(sweep_output_path(os.path.join(tmp, "seq"), config, "theta", value), "rb") as a, \
                        open(sweep_output_path(os.path.join(tmp, "par"), config, "theta", value), "rb") as b:
                    self.assertEqual(a.read(), b.read())
        self.assertEqual([r.value for r in parallel], values)
        self.assertEqual(sequential, parallel)

    def test_invalid_value_reported(self):
        results = sweep(BenchmarkConfig("convex-energy", max_total_dofs=100), "scheme", ["weighted"])
        self.assertIn("unknown scheme", results[0].error)
        self.assertIn("error:", results[0].summary("scheme"))

    def test_unknown_param(self):
        with self.assertRaises(ConfigError):
            sweep(BenchmarkConfig("convex-energy"), "omega", [1])

    def test_threads_from_env(self):
        with patch.dict(os.environ, {"ZLSFEM_THREADS": "3"}):
            self.assertEqual(threads_from_env(), 3)
        with patch.dict(os.environ, {"ZLSFEM_THREADS": "0"}):
            self.assertEqual(threads_from_env(), 1)
        with patch.dict(os.environ, {"ZLSFEM_THREADS": "many"}):
            with self.assertLogs(benchmarks.log, level="WARNING"):
                self.assertEqual(threads_from_env(default=5), 5)
        with patch.dict(os.environ, {}, clear=True):
            self.assertEqual(threads_from_env(default=2), 2)

    def test_reduction_factor(self):
        record = RunRecord(rows=[_row(1, 0, False), _row(1, 1, True), _row(2, 0, True)])
        record.rows[2].N = 0.1
        self.assertEqual(reduction_factor(record), (1.5, 0.1))
        with self.assertRaises(ValueError):
            reduction_factor(RunRecord())


class ConvexEnergyLongTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        if not LONG:
            raise unittest.SkipTest("set ZLSFEM_LONG=1 to run the long benchmarks")
        cls.record = run_benchmark(BenchmarkConfig("convex-energy", max_total_dofs=BUDGET)).record

    def test_optimal_rate(self):
        slope = convergence_slope(self.record.rows)
        self.assertGreaterEqual(slope, -0.55)
        self.assertLessEqual(slope, -0.42)

    def test_r_linear_decay(self):
        _, rho = estimate_contraction(self.record.rows)
        self.assertLessEqual(rho, 0.98)

    def test_one_factorization_per_mesh(self):
        self.assertTrue(all(n == 1 for n in self.record.factorizations.values()))


class SchemeSweepLongTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        if not LONG:
            raise unittest.SkipTest("set ZLSFEM_LONG=1 to run the long benchmarks")
        cls.records = {}
        for scheme in ("emphasized-gradient", "split", "balanced", "downscaled-flux"):
            config = BenchmarkConfig("convex-energy", scheme=scheme, max_total_dofs=SCHEME_BUDGET)
            cls.records[scheme] = run_benchmark(config).record

    def test_converging_schemes(self):
        for scheme in ("emphasized-gradient", "split"):
            first, best = reduction_factor(self.records[scheme])
            with self.subTest(scheme=scheme):
                self.assertGreaterEqual(first / best, 10.0)

    def test_stalling_schemes(self):
        for scheme in ("balanced", "downscaled-flux"):
            first, best = reduction_factor(self.records[scheme])
            with self.subTest(scheme=scheme):
                self.assertGreaterEqual(best, 0.5 * first)


class DeltaSweepLongTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        if not LONG:
            raise unittest.SkipTest("set ZLSFEM_LONG=1 to run the long benchmarks")
        cls.records = {delta: run_benchmark(BenchmarkConfig("convex-energy", delta=delta,
                                                            max_total_dofs=DELTA_BUDGET)).record
                       for delta in DELTA_VALUES}

    def _n_at(self, record, dofs):
        rows = [row for row in record.rows if row.n_dofs <= dofs]
        return rows[-1].N

    def test_full_step_is_never_beaten(self):
        matched = min(record.last.n_dofs for record in self.records.values())
        best = self._n_at(self.records[1.0], matched)
        for delta in DELTA_VALUES[:-1]:
            with self.subTest(delta=delta):
                self.assertLessEqual(best, 1.05 * self._n_at(self.records[delta], matched))


if __name__ == "__main__":
    unittest.main()
