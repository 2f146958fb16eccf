#!/usr/bin/env python3
"""Adaptive least-squares FEM for quasilinear PDEs: benchmark runs, sweeps and self-checks."""

import argparse
import json
import logging
import os
import sys

from benchmarks import SWEEP_PARAMS, ConfigError, load_config, parse_sweep_values, run_benchmark, sweep
from driver import BUDGET_FLAG
from linear_solver import NotSPDError
from mesh import export_mesh, make_initial_mesh, refine_uniform, write_mesh
from selfcheck import INJECTIONS, run_selfcheck

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2

DOMAINS = ("l-shape", "unit-square")


def print_ok(msg: str):
    print(f"ok: {msg}")


def print_err(msg: str):
    print(f"error: {msg}", file=sys.stderr)


def setup_logging(verbose: int):
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def do_run(args) -> int:
    config = load_config(args.config)
    result = run_benchmark(config, args.out)
    record = result.record
    last = record.last
    if last is None:
        print_ok(f"{config.benchmark}: no iterations")
        return EXIT_OK
    budget = record.meta.get("budget", "dof")
    ended = f"{budget} budget reached" if record.flag == BUDGET_FLAG else "finished"
    print_ok(f"{config.benchmark} ({config.scheme}) {ended}: {len(record.rows)} rows, "
             f"{last.n_dofs} dofs, eta={last.eta:.4e}, N={last.N:.4e}")
    if result.output:
        print(f"  csv: {result.output}")
    return EXIT_OK


def do_sweep(args) -> int:
    config = load_config(args.config)
    values = parse_sweep_values(args.param, args.values)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
    results = sweep(config, args.param, values, args.out_dir, parallel=args.parallel)

    print(f"\n{'VALUE':<{len(args.param) + 23}} {'ROWS':>5}  {'DOFS':>8}  {'ETA':>12}  {'N':>12}  FLAG")
    print("-" * 80)
    for r in results:
        print(r.summary(args.param))
    failed = [r for r in results if r.error]
    if failed:
        print_err(f"{len(failed)} of {len(results)} runs failed")
        return EXIT_CONFIG
    return EXIT_OK


def do_selfcheck(args) -> int:
    def progress(result):
        status = "ok" if result.ok else "FAILED"
        print(f"  {result.name:<28} {status:<6} {result.seconds:6.2f}s  {result.detail}")

    if args.inject:
        print(f"fault injection: {args.inject}")
    report = run_selfcheck(seed=args.seed, inject=args.inject, progress=progress)
    if report.ok:
        print_ok(f"{len(report.results)} checks passed")
        return EXIT_OK
    names = ", ".join(r.name for r in report.failures)
    print_err(f"{len(report.failures)} check(s) failed: {names}")
    return EXIT_INVARIANT


def do_mesh(args) -> int:
    if args.refine < 0:
        print_err("--refine must be >= 0")
        return EXIT_CONFIG
    mesh = refine_uniform(make_initial_mesh(args.domain), args.refine)
    if args.out:
        write_mesh(args.out, mesh)
        print_ok(f"{args.domain}: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles -> {args.out}")
    else:
        sys.stdout.write(export_mesh(mesh))
    return EXIT_OK


def main():
    prog = os.path.basename(sys.argv[0]) if sys.argv else 'zlsfem'
    parser = argparse.ArgumentParser(
        prog=prog,
        description='Adaptive Zarantonello least-squares FEM (lowest-order RT0 x S1)',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Commands:
  run                 Run one benchmark from a JSON config
  sweep               Run a benchmark once per parameter value
  selfcheck           Fast invariant suite (optionally with fault injection)
  mesh                Export an initial mesh in the OFF-like text format

Examples:
  zlsfem run --config convex.json --out convex.csv
  zlsfem sweep --param delta --values 0.01,0.05,0.1,0.5,1 --config convex.json --out-dir runs
  zlsfem sweep --param scheme --values emphasized-gradient,split --config convex.json --parallel
  zlsfem selfcheck --seed 3
  zlsfem selfcheck --inject halve-w1
  zlsfem mesh --domain l-shape --refine 2 --out lshape.off

Environment:
  ZLSFEM_THREADS      Max worker threads for --parallel sweeps (default: CPU count)
""")

    parser.add_argument('-v', '--verbose', action='count', default=0, help='More logging (-v info, -vv debug)')

    sub = parser.add_subparsers(dest='cmd', metavar='COMMAND')

    ru = sub.add_parser('run', help='Run one benchmark')
    ru.add_argument('--config', required=True, metavar='PATH', help='JSON benchmark config')
    ru.add_argument('--out', metavar='PATH', help='CSV output (overrides the config)')

    sw = sub.add_parser('sweep', help='Parameter sweep')
    sw.add_argument('--param', required=True, choices=SWEEP_PARAMS, help='Parameter to vary')
    sw.add_argument('--values', required=True, help='Comma-separated values')
    sw.add_argument('--config', required=True, metavar='PATH', help='JSON benchmark config')
    sw.add_argument('--out-dir', metavar='DIR', help='One CSV per value in DIR')
    sw.add_argument('--parallel', action='store_true', help='Run values in parallel threads')

    sc = sub.add_parser('selfcheck', help='Invariant suite',
                        formatter_class=argparse.RawDescriptionHelpFormatter,
                        description="""
Fast invariant suite at reduced sample sizes:
  conformity fuzz             40 random-mark NVB steps on the L-shape
  fundamental equivalence     every scheme on the unit square after 2 and 3 uniform passes
  monotonicity and lipschitz  50 random pairs per scheme
  pythagoras and minimality   20 random competitors for one step
  doerfler oracle             200 exhaustive-subset cases

The unit tests run the full sizes (1000 steps, 3 meshes x 500 vectors, 200 pairs).
""")
    sc.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
    sc.add_argument('--inject', choices=INJECTIONS, help='Inject a known fault')

    me = sub.add_parser('mesh', help='Export an initial mesh')
    me.add_argument('--domain', required=True, choices=DOMAINS, help='Initial domain')
    me.add_argument('--refine', type=int, default=0, metavar='N', help='Uniform refinement passes (default: 0)')
    me.add_argument('--out', metavar='PATH', help='Output file (default: stdout)')

    args = parser.parse_args()

    if not args.cmd:
        parser.print_help()
        sys.exit(EXIT_OK)

    setup_logging(args.verbose)

    cmds = {
        'run': do_run,
        'sweep': do_sweep,
        'selfcheck': do_selfcheck,
        'mesh': do_mesh,
    }

    try:
        status = cmds[args.cmd](args)
    except (ConfigError, OSError, json.JSONDecodeError) as e:
        print_err(str(e))
        sys.exit(EXIT_CONFIG)
    except NotSPDError as e:
        print_err(str(e))
        sys.exit(EXIT_INVARIANT)
    sys.exit(status)


if __name__ == '__main__':
    main()
