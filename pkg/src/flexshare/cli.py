"""Operator command line: deploy admissions, sweep comparisons, simulate.

Exit codes: 0 success, 1 admission rejected / unstable state, 2 usage or
parse error, 3 numerical failure.  Set FLEXSHARE_LOG=debug|info|warning
for trace verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import oracle, pruning, sim
from .convex import SolverFailure
from .generators import generate_realistic, generate_synthetic
from .model import (
    Scenario,
    ScenarioError,
    load_scenario,
    load_state,
    save_state,
    total_cost,
)
from .queueing import InstabilityError

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

STRATEGIES = ("per-service", "per-vnf", "per-vnf-brute", "per-request")

COMPARE_COLUMNS = [
    "scenario",
    "n",
    "scheme",
    "total_cost",
    "shared_services_mean",
    "mu_used_sum",
    "c_max_sum",
    "admissions_ok",
]


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("FLEXSHARE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")


def _load_or_generate(args) -> tuple[Scenario, str]:
    scheme = getattr(args, "scheme", None) or "per-vnf"
    if scheme == "per-vnf-brute":
        scheme = "per-vnf"
    jitter = getattr(args, "jitter", None)
    if jitter is not None and scheme != "per-request":
        raise UsageError("--jitter applies to the per-request scheme only")
    avg = {"paper": "paper-literal", "self-excluded": "self-excluded"}[
        getattr(args, "avg_factor", "self-excluded")
    ]
    if args.scenario:
        scenario = load_scenario(args.scenario)
        scenario = scenario.with_scheme(scheme, jitter)
        if avg != scenario.averaging_factor_mode:
            from dataclasses import replace

            scenario = replace(scenario, averaging_factor_mode=avg)
        scenario.validate()
        return scenario, os.path.basename(args.scenario)
    if args.generate == "synthetic":
        if args.seed is None:
            raise UsageError("--generate synthetic requires --seed")
        return (
            generate_synthetic(args.n, seed=args.seed, scheme=scheme, jitter=jitter,
                               averaging_factor_mode=avg),
            "synthetic",
        )
    if args.generate == "realistic":
        return (
            generate_realistic(args.n, scheme=scheme, jitter=jitter,
                               averaging_factor_mode=avg),
            "realistic",
        )
    raise UsageError("provide --scenario or --generate")


def cmd_deploy(args) -> int:
    scenario, _name = _load_or_generate(args)
    order = args.order.split(",") if args.order else sorted(scenario.services)
    for s in order:
        if s not in scenario.services:
            raise UsageError(f"unknown service {s!r} in --order")
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, "trace.jsonl")
    state_path = os.path.join(args.out, "state.json")
    rejected: list[str] = []
    with open(trace_path, "w") as trace_fh:
        from .model import DeploymentState

        state = DeploymentState()
        for s in order:
            result = pruning.admit(s, state, scenario)
            for rec in result.trace:
                doc = json.loads(rec.to_json())
                doc["service"] = s
                trace_fh.write(json.dumps(doc) + "\n")
            summary = {
                "service": s,
                "status": result.status,
                "iterations": result.iterations,
                "cost_delta": result.cost_delta,
                "pruned_edges": [list(e) for e in result.pruned_edges],
            }
            trace_fh.write(json.dumps(summary) + "\n")
            print(json.dumps(summary))
            if result.admitted:
                state = result.state
            else:
                rejected.append(s)
                if not args.continue_on_reject:
                    save_state(state, scenario, state_path)
                    print(json.dumps({"error": "rejected", "service": s}))
                    return EXIT_REJECTED
    save_state(state, scenario, state_path)
    print(json.dumps({"total_cost": total_cost(state, scenario),
                      "admitted": list(state.admitted_services()),
                      "rejected": rejected}))
    return EXIT_REJECTED if rejected else EXIT_OK


def _parse_n_values(args) -> list[float]:
    if args.n_range:
        try:
            start, stop, step = (float(x) for x in args.n_range.split(":"))
        except ValueError:
            raise UsageError("--n-range must be start:stop:step") from None
        if step <= 0:
            raise UsageError("--n-range step must be positive")
        out = []
        x = start
        while x <= stop + 1e-9:
            out.append(round(x, 9))
            x += step
        return out
    if args.n_list:
        return [float(x) for x in args.n_list.split(",")]
    return [args.n]


def compare_cell(scenario_name: str, args_dict: dict, n: float, strategy: str) -> dict:
    """One sweep cell: deploy every service under one strategy and report
    the cost and sharing metrics."""
    ns = argparse.Namespace(**args_dict)
    ns.n = n
    ns.scheme = strategy
    scenario, _ = _load_or_generate(ns)
    admit_fn = oracle.admit_brute if strategy == "per-vnf-brute" else pruning.admit
    order = sorted(scenario.services)
    state, results = pruning.deploy_sequence(order, scenario, admit_fn=admit_fn)
    instances = state.instances()
    shared_mean = (
        float(np.mean([len(ss) for ss in instances.values()])) if instances else 0.0
    )
    return {
        "scenario": scenario_name,
        "n": n,
        "scheme": strategy,
        "total_cost": total_cost(state, scenario),
        "shared_services_mean": shared_mean,
        "mu_used_sum": sum(state.capabilities.values()),
        "c_max_sum": sum(scenario.vm(m).max_capability for m in state.placement),
        "admissions_ok": all(r.admitted for r in results),
    }


def cmd_compare(args) -> int:
    schemes = [s for s in (args.schemes or "").split(",") if s]
    if not schemes:
        raise UsageError("--schemes must list at least one strategy")
    for s in schemes:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    n_values = _parse_n_values(args)
    args_dict = dict(vars(args))
    scenario_name = args.scenario and os.path.basename(args.scenario) or args.generate
    cells = [(scenario_name, args_dict, n, s) for n in n_values for s in schemes]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_compare_cell_star, cells))
    else:
        rows = [compare_cell(*c) for c in cells]
    out_fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out_fh, fieldnames=COMPARE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    finally:
        if args.out:
            out_fh.close()
    return EXIT_OK


def _compare_cell_star(cell):
    return compare_cell(*cell)


def cmd_validate(args) -> int:
    if args.completions < sim.MIN_HORIZON:
        raise UsageError(f"--completions must be >= {sim.MIN_HORIZON}")
    scenario = load_scenario(args.scenario)
    state = load_state(args.state)
    state.validate(scenario)
    cfg = sim.SimConfig(
        state=state, scenario=scenario, horizon=args.completions, seed=args.seed
    )
    report = sim.simulate(cfg)
    rows = sim.compare_to_analytic(report, state, scenario, threshold=args.threshold)
    out_fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out_fh)
        for row in sim.deviation_csv_rows(rows):
            writer.writerow(row)
    finally:
        if args.out:
            out_fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexshare",
        description="VNF sharing, priority, and VM scaling decisions for one point of presence",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_scenario_args(p, with_scheme=True):
        p.add_argument("--scenario", help="scenario JSON file")
        p.add_argument("--generate", choices=["synthetic", "realistic"],
                       help="generate a built-in scenario instead of loading one")
        p.add_argument("--n", type=float, default=1.0, help="traffic multiplier")
        p.add_argument("--seed", type=int, default=None, help="generator seed")
        p.add_argument("--jitter", type=float, default=None,
                       help="uniform priority half-width (per-request scheme)")
        p.add_argument("--avg-factor", choices=["paper", "self-excluded"],
                       default="self-excluded", dest="avg_factor",
                       help="averaging rule for the pinned outranking totals")
        if with_scheme:
            p.add_argument("--scheme",
                           choices=["per-service", "per-vnf", "per-request"],
                           default="per-vnf")

    p_deploy = sub.add_parser("deploy", help="admit services one by one")
    add_scenario_args(p_deploy)
    p_deploy.add_argument("--order", help="comma-separated admission order")
    p_deploy.add_argument("--out", required=True, help="output directory")
    p_deploy.add_argument("--continue-on-reject", action="store_true",
                          help="keep admitting after a rejection")
    p_deploy.set_defaults(fn=cmd_deploy)

    p_cmp = sub.add_parser("compare", help="sweep traffic and strategies, emit CSV")
    add_scenario_args(p_cmp, with_scheme=False)
    p_cmp.add_argument("--n-range", help="traffic sweep as start:stop:step")
    p_cmp.add_argument("--n-list", help="comma-separated traffic multipliers")
    p_cmp.add_argument("--schemes", default="per-service,per-vnf,per-request",
                       help=f"comma-separated strategies from {STRATEGIES}")
    p_cmp.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    p_cmp.add_argument("--out", help="CSV output path (default stdout)")
    p_cmp.set_defaults(fn=cmd_compare)

    p_val = sub.add_parser("validate", help="simulate a deployed state and compare")
    p_val.add_argument("--scenario", required=True)
    p_val.add_argument("--state", required=True, help="state JSON from deploy")
    p_val.add_argument("--completions", type=int, default=1_000_000,
                       help="completed requests per class per queue")
    p_val.add_argument("--seed", type=int, default=1)
    p_val.add_argument("--threshold", type=float, default=0.02,
                       help="relative deviation that raises a flag")
    p_val.add_argument("--out", help="CSV output path (default stdout)")
    p_val.set_defaults(fn=cmd_validate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "detail": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as exc:
        print(json.dumps({"error": "scenario", "detail": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except InstabilityError as exc:
        print(json.dumps({"error": "instability", "vm": exc.vm, "detail": str(exc)}),
              file=sys.stderr)
        return EXIT_REJECTED
    except SolverFailure as exc:
        print(json.dumps({"error": "numerical", "detail": str(exc)}), file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
