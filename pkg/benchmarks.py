"""Benchmark problems, JSON configuration, CSV output and parameter sweeps."""

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from assembly import DEFAULT_SOURCE_DEGREE, BoxIndicator, ConstantField, Field, LinearData, ProblemSpec
from driver import (BUDGET_FLAG, MARKINGS, SOLVERS, AlgorithmParams, LevelContext, RunRecord, RunRow,
                    run_adaptive_zarantonello, run_alsfem_linear)
from estimator import EstimatorReport, write_indicator_csv
from fem_space import write_solution
from mesh import write_mesh
from nonlinearity import (SCHEMES, WeightedScheme, compute_weights, convex_energy, forchheimer,
                          linear_identity)

log = logging.getLogger(__name__)

BENCHMARKS = ("convex-energy", "porous-media", "linear-manufactured")
SWEEP_PARAMS = ("delta", "gamma", "theta", "scheme")

L_SHAPE_FRIEDRICHS = 0.32208292665417854
UNIT_SQUARE_FRIEDRICHS = 1.0 / (math.sqrt(2.0) * math.pi)

POROUS_SUPPORT = ((-0.6, 0.4), (-0.4, 0.6))
POROUS_PREREFINE = 3

CSV_COLUMNS = ["benchmark", "scheme", "delta", "gamma", "theta", "k", "ell", "accepted",
               "n_elem", "n_rt", "n_s1", "eta", "mu", "N", "grad_inf", "marked", "wall_ms", "flag"]


class ConfigError(ValueError):
    """Invalid benchmark configuration."""


@dataclass
class BenchmarkConfig:
    benchmark: str
    scheme: str = "emphasized-gradient"
    delta: float = 1.0
    gamma: float = 0.9
    theta: float = 0.3
    max_total_dofs: int = 200000
    max_outer_iters: int = 60
    c_f: Optional[float] = None
    output: Optional[str] = None
    seed: int = 0
    tau: float = 0.0
    marking: str = "doerfler"
    solver: str = "direct"
    source_quadrature_degree: int = DEFAULT_SOURCE_DEGREE
    record_wall_time: bool = True
    indicator_dump: Optional[str] = None
    solution_dump: Optional[str] = None
    mesh_dump: Optional[str] = None

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark '{self.benchmark}' (expected one of {', '.join(BENCHMARKS)})")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme '{self.scheme}' (expected one of {', '.join(SCHEMES)})")
        if self.marking not in MARKINGS:
            raise ConfigError(f"unknown marking '{self.marking}'")
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver '{self.solver}'")
        if self.source_quadrature_degree not in (1, 2, 3, 4):
            raise ConfigError(f"source_quadrature_degree must be 1..4 (got {self.source_quadrature_degree})")
        if self.c_f is not None and not self.c_f > 0:
            raise ConfigError(f"c_f must be positive (got {self.c_f})")
        self.params()

    @property
    def friedrichs(self) -> float:
        if self.c_f is not None:
            return float(self.c_f)
        return UNIT_SQUARE_FRIEDRICHS if self.benchmark == "linear-manufactured" else L_SHAPE_FRIEDRICHS

    @property
    def flux_sign(self) -> float:
        """Sign mapping the computed flux back to the benchmark's own convention."""
        return -1.0 if self.benchmark == "porous-media" else 1.0

    def params(self) -> AlgorithmParams:
        try:
            return AlgorithmParams(
                delta=float(self.delta), gamma=float(self.gamma), theta=float(self.theta),
                tau=float(self.tau), max_total_dofs=int(self.max_total_dofs),
                max_outer_iters=int(self.max_outer_iters), scheme=self.scheme,
                marking=self.marking, solver=self.solver,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def config_from_dict(data: Dict[str, Any]) -> BenchmarkConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(BenchmarkConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if "benchmark" not in data:
        raise ConfigError("config needs a 'benchmark' key")
    try:
        return BenchmarkConfig(**data)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str) -> BenchmarkConfig:
    """Read a JSON config; OSError and json.JSONDecodeError propagate to the caller."""
    with open(path, encoding="utf-8") as f:
        return config_from_dict(json.load(f))


# Problems

def convex_energy_problem(c_f: float = L_SHAPE_FRIEDRICHS,
                          degree: int = DEFAULT_SOURCE_DEGREE) -> ProblemSpec:
    return ProblemSpec("l-shape", ConstantField(1.0), ConstantField((0.0, 0.0), rank=1),
                       convex_energy(), c_f, source_degree=degree)


def porous_media_problem(c_f: float = L_SHAPE_FRIEDRICHS,
                         degree: int = DEFAULT_SOURCE_DEGREE) -> ProblemSpec:
    """div p = f, p = -sigma(grad u), solved for the flux -p so that f1 = f."""
    lower, upper = POROUS_SUPPORT
    return ProblemSpec("l-shape", BoxIndicator(lower, upper), ConstantField((0.0, 0.0), rank=1),
                       forchheimer(), c_f, prerefine=POROUS_PREREFINE, source_degree=degree)


def manufactured_u(points: np.ndarray) -> np.ndarray:
    x, y = points[..., 0], points[..., 1]
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def manufactured_grad(points: np.ndarray) -> np.ndarray:
    x, y = points[..., 0], points[..., 1]
    return np.pi * np.stack([np.cos(np.pi * x) * np.sin(np.pi * y),
                             np.sin(np.pi * x) * np.cos(np.pi * y)], axis=-1)


def manufactured_data(scheme: WeightedScheme, c_f: float = UNIT_SQUARE_FRIEDRICHS,
                      degree: int = DEFAULT_SOURCE_DEGREE) -> LinearData:
    """u = sin(pi x) sin(pi y), p = grad u; g1 = -w1 div p, g2 = -a p + b grad u."""
    w1 = scheme.w1
    g1 = Field(lambda pts: 2.0 * np.pi ** 2 * w1 * manufactured_u(pts), rank=0)
    g2 = Field(lambda pts: (scheme.b - scheme.a) * manufactured_grad(pts), rank=1)
    return LinearData(g1, g2, c_f, domain="unit-square", source_degree=degree,
                      exact_flux=manufactured_grad, exact_u=manufactured_u)


def make_problem(config: BenchmarkConfig) -> Union[ProblemSpec, LinearData]:
    degree = config.source_quadrature_degree
    if config.benchmark == "convex-energy":
        return convex_energy_problem(config.friedrichs, degree)
    if config.benchmark == "porous-media":
        return porous_media_problem(config.friedrichs, degree)
    identity = linear_identity()
    scheme = compute_weights(config.scheme, identity.lambda1, identity.lambda2)
    return manufactured_data(scheme, config.friedrichs, degree)


# Output

def _cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvSink:
    """Streams run rows to CSV, holding back the last row so it can carry the run flag."""

    def __init__(self, path: str, config: BenchmarkConfig):
        self.path = path
        self.config = config
        self._pending: Optional[RunRow] = None
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        self._file = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(CSV_COLUMNS)

    def _write(self, row: RunRow, flag: str = "") -> None:
        c = self.config
        wall = float(round(row.wall_ms, 3)) if c.record_wall_time else 0
        values = [c.benchmark, c.scheme, float(c.delta), float(c.gamma), float(c.theta),
                  row.k, row.ell, row.accepted, row.n_elem, row.n_rt, row.n_s1,
                  float(row.eta), float(row.mu), float(row.N), float(row.grad_inf),
                  row.marked, wall, flag]
        self._writer.writerow([_cell(v) for v in values])

    def __call__(self, row: RunRow) -> None:
        if self._pending is not None:
            self._write(self._pending)
        self._pending = row
        self._file.flush()

    def close(self, flag: str = "") -> None:
        if self._pending is not None:
            self._write(self._pending, flag)
            self._pending = None
        self._file.close()


class _Dumps:
    """on_level hook writing the optional per-level dumps."""

    def __init__(self, config: BenchmarkConfig):
        self.config = config
        for path in (config.indicator_dump, config.solution_dump, config.mesh_dump):
            if path:
                os.makedirs(path, exist_ok=True)

    def __call__(self, ctx: LevelContext) -> None:
        c = self.config
        tag = f"k{ctx.k:03d}_l{ctx.ell:03d}"
        if c.indicator_dump:
            mu = ctx.mu_local if ctx.mu_local is not None else np.zeros_like(ctx.eta_local)
            write_indicator_csv(os.path.join(c.indicator_dump, f"indicators_{tag}.csv"),
                                EstimatorReport(ctx.eta_local, "eta-k"), EstimatorReport(mu, "mu-k"))
        if ctx.accepted and c.solution_dump:
            write_solution(os.path.join(c.solution_dump, f"solution_{tag}.txt"), ctx.current,
                           ctx.k, ctx.ell, flux_sign=c.flux_sign)
        if c.mesh_dump:
            write_mesh(os.path.join(c.mesh_dump, f"mesh_{tag}.off"), ctx.mesh)


@dataclass
class BenchmarkResult:
    status: int
    record: RunRecord
    output: Optional[str]


def run_benchmark(config: BenchmarkConfig, output: Optional[str] = None) -> BenchmarkResult:
    """Run the configured benchmark, streaming rows to the CSV output if one is set."""
    output = output or config.output
    problem = make_problem(config)
    params = config.params()
    sink = CsvSink(output, config) if output else None
    dumps = _Dumps(config) if (config.indicator_dump or config.solution_dump or config.mesh_dump) else None
    log.info("benchmark %s (%s), c_f=%.17g", config.benchmark, config.scheme, config.friedrichs)
    record = None
    try:
        if isinstance(problem, LinearData):
            identity = linear_identity()
            scheme = compute_weights(config.scheme, identity.lambda1, identity.lambda2)
            record = run_alsfem_linear(problem, scheme, params, on_row=sink, on_level=dumps)
        else:
            record = run_adaptive_zarantonello(problem, params, on_row=sink, on_level=dumps)
    finally:
        if sink is not None:
            sink.close(record.flag if record is not None else "")
    if record.flag == BUDGET_FLAG:
        log.info("run ended on the %s budget", record.meta.get("budget", "dof"))
    return BenchmarkResult(0, record, output)


# Sweeps

def parse_sweep_values(param: str, text: str) -> List[Union[float, str]]:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep '{param}' (expected one of {', '.join(SWEEP_PARAMS)})")
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("no sweep values given")
    if param == "scheme":
        return items
    try:
        return [float(v) for v in items]
    except ValueError as e:
        raise ConfigError(f"sweep values for {param} must be numbers: {e}") from e


def sweep_output_path(out_dir: str, config: BenchmarkConfig, param: str, value) -> str:
    return os.path.join(out_dir, f"{config.benchmark}_{param}-{value}.csv")


@dataclass
class SweepResult:
    value: Union[float, str]
    rows: int = 0
    final_dofs: int = 0
    final_eta: float = float("nan")
    final_N: float = float("nan")
    flag: str = ""
    error: Optional[str] = None

    def summary(self, param: str) -> str:
        if self.error:
            return f"{param}={self.value!s:<22} error: {self.error}"
        return (f"{param}={self.value!s:<22} {self.rows:>5}  {self.final_dofs:>8}  "
                f"{self.final_eta:>12.4e}  {self.final_N:>12.4e}  {self.flag}")


def threads_from_env(default: Optional[int] = None) -> int:
    value = os.getenv("ZLSFEM_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            log.warning("ignoring non-integer ZLSFEM_THREADS=%r", value)
    return default or os.cpu_count() or 1


def _sweep_one(config: BenchmarkConfig, param: str, value, out_dir: Optional[str]) -> SweepResult:
    try:
        cfg = replace(config, **{param: value}, output=None)
    except ConfigError as e:
        return SweepResult(value, error=str(e))
    output = sweep_output_path(out_dir, cfg, param, value) if out_dir else None
    record = run_benchmark(cfg, output).record
    last = record.accepted_rows()[-1] if record.accepted_rows() else record.last
    if last is None:
        return SweepResult(value, flag=record.flag)
    return SweepResult(value, len(record.rows), last.n_dofs, last.eta, last.N, record.flag)


def sweep(config: BenchmarkConfig, param: str, values: Sequence, out_dir: Optional[str] = None,
          parallel: bool = False, max_workers: Optional[int] = None) -> List[SweepResult]:
    """One run per value; results come back in the order of values."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep '{param}' (expected one of {', '.join(SWEEP_PARAMS)})")
    if not parallel:
        return [_sweep_one(config, param, v, out_dir) for v in values]

    results: Dict[int, SweepResult] = {}
    with ThreadPoolExecutor(max_workers=max_workers or threads_from_env()) as executor:
        futures = {executor.submit(_sweep_one, config, param, v, out_dir): i for i, v in enumerate(values)}
        for future in as_completed(futures):
            i = futures[future]
            try:
                results[i] = future.result()
            except Exception as e:
                results[i] = SweepResult(values[i], error=str(e))
    return [results[i] for i in range(len(values))]


def reduction_factor(record: RunRecord) -> Tuple[float, float]:
    """(first N, smallest N) over the accepted iterates of a run."""
    rows = record.accepted_rows() or record.rows
    if not rows:
        raise ValueError("empty run record")
    return rows[0].N, min(row.N for row in rows)
