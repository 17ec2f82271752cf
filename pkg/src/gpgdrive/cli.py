"""Command line: run closed-loop simulations and self-checks.

`gpgdrive run` simulates a scenario and writes trajectory/metrics files;
`gpgdrive check` exercises the gradient and potential-decomposition checks
on the shipped scenario and prints a short report. Exit codes: 0 success,
1 failed check, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import exprgraph
from .exprgraph import Evaluator
from .game import ConfigurationError, build_gpg, verify_potential_condition
from .scenario import ScenarioError, load_scenario, packaged_scenario_path
from .simulate import emit_outputs, run_closed_loop


def _resolve_scenario(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    try:
        return packaged_scenario_path(name_or_path)
    except FileNotFoundError:
        raise FileNotFoundError(
            f"scenario {name_or_path!r} is neither a file nor a packaged scenario"
        ) from None


def _apply_overrides(cfg, args) -> None:
    import dataclasses

    if args.steps is not None:
        cfg.steps = args.steps
    if args.learning is not None:
        cfg.learning = dataclasses.replace(cfg.learning, enabled=args.learning == "on")
    if args.tol is not None or args.feas is not None:
        cfg.solver = dataclasses.replace(
            cfg.solver,
            tol=args.tol if args.tol is not None else cfg.solver.tol,
            feas=args.feas if args.feas is not None else cfg.solver.feas,
        )
    if args.behavior is not None:
        preset = cfg.behavior_presets.get(args.behavior)
        if preset is None:
            raise ScenarioError(f"no behavior preset named {args.behavior!r}")
        replaced = []
        for p in cfg.players:
            if p.id in preset:
                replaced.append(dataclasses.replace(p, theta=tuple(preset[p.id])))
            else:
                replaced.append(p)
        cfg.players = tuple(replaced)
    if args.belief is not None:
        preset = cfg.behavior_presets.get(args.belief)
        if preset is None:
            raise ScenarioError(f"no behavior preset named {args.belief!r}")
        for agent, block in cfg.beliefs.items():
            for target in block:
                if target in preset:
                    block[target] = np.asarray(preset[target], dtype=float)


def cmd_run(args) -> int:
    try:
        path = _resolve_scenario(args.scenario)
        cfg = load_scenario(path)
        _apply_overrides(cfg, args)
    except (ScenarioError, ConfigurationError, FileNotFoundError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    run = run_closed_loop(cfg, collect_plans=args.svg)
    try:
        written = emit_outputs(run, args.out, cfg, svg=args.svg)
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    s = run.summary
    print(
        f"steps: {len(run.records)}  potential: {s['closed_loop_potential']:.3f}  "
        f"max violation: {s['max_violation']:.4g}  status: {s['status']}"
    )
    print(
        f"gpg ms max/avg: {s['gpg_ms']['max']:.1f}/{s['gpg_ms']['avg']:.1f}  "
        f"learn ms max/avg: {s['learn_ms']['max']:.1f}/{s['learn_ms']['avg']:.1f}"
    )
    print(f"outputs: {', '.join(str(w) for w in written[:4])}")
    return 0


def cmd_check(args) -> int:
    try:
        path = _resolve_scenario(args.scenario)
        cfg = load_scenario(path)
    except (ScenarioError, ConfigurationError, FileNotFoundError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    ego = cfg.gpg_ids()[0]
    problem = build_gpg(cfg.players, cfg.shared_cost, cfg.beliefs[ego], cfg.n, cfg.ts, ego=ego)
    rng = np.random.default_rng(0)
    ok = True

    ev = Evaluator(problem.graph)
    worst_fd = 0.0
    for _ in range(10):
        u = rng.uniform(problem.lb, problem.ub)
        full = problem.assignment(u=u)
        _, grad = ev.value_and_grad(full, problem.potential.node)
        for i in rng.choice(problem.num_decisions, 6, replace=False):
            s = problem.decision_slots[i]
            h = 1e-6 * (1.0 + abs(full[s]))
            fp = full.copy()
            fp[s] += h
            fm = full.copy()
            fm[s] -= h
            fd = (ev.value(fp, problem.potential.node) - ev.value(fm, problem.potential.node)) / (2 * h)
            worst_fd = max(worst_fd, abs(grad[s] - fd) / max(1.0, abs(fd)))
    print(f"gradient vs central differences: max rel err {worst_fd:.2e} "
          f"({'ok' if worst_fd <= 1e-6 else 'FAIL'})")
    ok &= worst_fd <= 1e-6

    worst_pc = 0.0
    for _ in range(5):
        u = rng.uniform(problem.lb, problem.ub)
        for pid in cfg.gpg_ids():
            worst_pc = max(worst_pc, verify_potential_condition(problem, u, pid))
    print(f"potential-decomposition deviation: max {worst_pc:.2e} "
          f"({'ok' if worst_pc <= 1e-9 else 'FAIL'})")
    ok &= worst_pc <= 1e-9

    g = exprgraph.ExprGraph()
    x = g.var("x")
    expr = exprgraph.sin(x) * exprgraph.exp(x) + exprgraph.plus(x - 0.5) ** 2
    err = exprgraph.check_gradient(g, {"x": 0.3}, output=expr)
    print(f"scalar-graph gradient check: {err:.2e} ({'ok' if err <= 1e-6 else 'FAIL'})")
    ok &= err <= 1e-6

    print("all checks passed" if ok else "CHECKS FAILED")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gpgdrive", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="simulate a scenario and write outputs")
    run_p.add_argument("--scenario", required=True, help="scenario file or packaged name")
    run_p.add_argument("--steps", type=int, default=None)
    run_p.add_argument("--learning", choices=("on", "off"), default=None)
    run_p.add_argument("--belief", default=None, help="preset name for initial beliefs")
    run_p.add_argument("--behavior", default=None, help="preset name for true behavior")
    run_p.add_argument("--tol", type=float, default=None)
    run_p.add_argument("--feas", type=float, default=None)
    run_p.add_argument("--out", default="out")
    run_p.add_argument("--svg", action="store_true")
    run_p.add_argument("--log-level", default="warning")
    run_p.set_defaults(fn=cmd_run)

    check_p = sub.add_parser("check", help="run gradient/potential self-tests")
    check_p.add_argument("--scenario", default="merging")
    check_p.add_argument("--log-level", default="warning")
    check_p.set_defaults(fn=cmd_check)

    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
