"""Emit a JSON report with convergence rates, contraction fit and empirical constants of a run."""

import argparse
import json
import os
import sys
import time
from dataclasses import replace

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

from assembly import LinearData
from benchmarks import load_config, make_problem, reduction_factor
from driver import convergence_slope, estimate_contraction, run_adaptive_zarantonello, run_alsfem_linear
from estimator import reliability_efficiency
from nonlinearity import compute_weights, linear_identity


def _fit(fn, *args):
    try:
        return fn(*args)
    except ValueError:
        return None


def collect_run(config):
    problem = make_problem(config)
    params = config.params()
    accepted = []

    def keep(ctx):
        if ctx.accepted:
            accepted[:] = [ctx]

    started = time.perf_counter()
    if isinstance(problem, LinearData):
        identity = linear_identity()
        scheme = compute_weights(config.scheme, identity.lambda1, identity.lambda2)
        record = run_alsfem_linear(problem, scheme, params)
    else:
        nl = problem.nonlinearity
        scheme = compute_weights(config.scheme, nl.lambda1, nl.lambda2)
        record = run_adaptive_zarantonello(problem, params, on_level=keep)
    elapsed = time.perf_counter() - started

    contraction = _fit(estimate_contraction, record.rows)
    entry = {
        "benchmark": config.benchmark,
        "scheme": config.scheme,
        "delta": config.delta,
        "gamma": config.gamma,
        "theta": config.theta,
        "flag": record.flag,
        "rows": len(record.rows),
        "outer_steps": len({row.k for row in record.rows}),
        "final_dofs": record.last.n_dofs if record.last else 0,
        "seconds": round(elapsed, 3),
        "slope": _fit(convergence_slope, record.rows),
        "contraction": None if contraction is None else {"C": contraction[0], "rho": contraction[1]},
        "reduction": None,
        "constants": None,
        "meta": record.meta,
    }
    if record.rows:
        first, best = reduction_factor(record)
        entry["reduction"] = {"first_N": first, "best_N": best}
    if accepted:
        ctx = accepted[0]
        constants = reliability_efficiency(ctx.mesh, scheme, problem.c_f, config.delta, ctx.prev,
                                           ctx.current, problem)
        entry["constants"] = {"reliability": constants.reliability, "efficiency": constants.efficiency,
                              "reference_dofs": constants.reference_dofs}
    return entry


def main():
    parser = argparse.ArgumentParser(description="Emit a JSON convergence report for a benchmark config")
    parser.add_argument("--config", required=True, help="JSON benchmark config")
    parser.add_argument("--budget", type=int, help="Override max_total_dofs")
    parser.add_argument("--out", help="Write JSON to file instead of stdout")
    parser.add_argument("--pretty", action="store_true", help="Pretty-print JSON")
    args = parser.parse_args()

    config = load_config(args.config)
    if args.budget:
        config = replace(config, max_total_dofs=args.budget)

    report = {
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "runs": [collect_run(config)],
    }

    payload = json.dumps(report, indent=2 if args.pretty else None, sort_keys=True)

    if args.out:
        out_path = os.path.abspath(args.out)
        os.makedirs(os.path.dirname(out_path), exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as handle:
            handle.write(payload)
            handle.write("\n")
    else:
        print(payload)


if __name__ == "__main__":
    main()
