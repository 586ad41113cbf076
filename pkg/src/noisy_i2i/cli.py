"""Command line entry point.

Exit codes: 0 success, 2 invalid plan or arguments, 3 some runs failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from . import plots
from .errors import InvalidInputError, InvalidSpecError

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 2, 3


def _root(args, plan=None) -> Path:
    if plan is not None:
        return ex.resolve_output_root(plan, args.out)
    if args.out is not None:
        return Path(args.out)
    env = os.environ.get(ex.OUT_ENV)
    if not env:
        raise InvalidSpecError(f"give --out or set {ex.OUT_ENV}")
    return Path(env)


def _run(plan, args, resume: bool) -> int:
    outcome = ex.run_plan(plan, workers=args.workers, out=args.out, resume=resume)
    print((outcome.root / "report.txt").read_text(), end="")
    if outcome.failures:
        print(f"{len(outcome.failures)} run(s) failed; see {outcome.root / 'failures.json'}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_run(args) -> int:
    return _run(ex.ExperimentPlan.load(args.plan), args, resume=args.resume)


def cmd_resume(args) -> int:
    return _run(ex.ExperimentPlan.load(args.plan), args, resume=True)


def cmd_report(args) -> int:
    root = _root(args)
    results = ex.load_results(root)
    if not results:
        raise InvalidInputError(f"no completed runs under {root}")
    plan = ex.ExperimentPlan.from_dict(json.loads((root / "plan.json").read_text())) \
        if (root / "plan.json").exists() else None
    ex.write_report(root, results, expected=plan)
    print((root / "report.txt").read_text(), end="")
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    plan = ex.ExperimentPlan.load(args.plan)
    alphas = [float(a) for a in args.alphas.split(",")]
    swept = ex.sweep_plan(plan, alphas)
    code = _run(replace(swept, name=plan.name + "-alpha"), args, resume=args.resume)
    root = ex.resolve_output_root(plan, args.out)
    rows = ex.sweep_rows(ex.load_results(root), alphas)
    (root / "alpha_sweep.json").write_text(json.dumps(rows, indent=1))
    plots.plot_alpha_sweep(rows, root / "figures")
    for r in rows:
        print(f"alpha={r['alpha']:.2f}  CA={r['ca']:.1f}  FID={r['fid']:.3f}  (n={r['trials']})")
    return code


def cmd_correlate(args) -> int:
    root = _root(args)
    results = ex.load_results(root)
    rho, flagged = ex.correlation_report(results)
    (root / "correlations.json").write_text(json.dumps(
        {"rho": {f"{a}-{b}": v for (a, b), v in rho.items()}, "constant": [f"{a}-{b}" for a, b in flagged]},
        indent=1))
    plots.plot_correlations(results, rho, root / "figures")
    for (a, b), v in sorted(rho.items()):
        print(f"{a:>8} vs {b:<8} |rho| = {v:.3f}")
    for a, b in flagged:
        print(f"{a:>8} vs {b:<8} omitted: constant series")
    return EXIT_OK


def cmd_plot(args) -> int:
    root = _root(args)
    for p in plots.plot_trajectories(ex.load_results(root), root / "figures"):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisy-i2i", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def add(name, fn, plan=True, help=None):
        sp = sub.add_parser(name, help=help)
        if plan:
            sp.add_argument("--plan", required=True, help="YAML plan file")
        sp.add_argument("--out", default=None, help=f"output root (overrides ${ex.OUT_ENV} and the plan)")
        sp.set_defaults(fn=fn)
        return sp

    for name, fn, help_ in (("run", cmd_run, "train every cell of a plan"),
                            ("resume", cmd_resume, "continue interrupted runs from checkpoints")):
        sp = add(name, fn, help=help_)
        sp.add_argument("--workers", type=int, default=1)
        if name == "run":
            sp.add_argument("--resume", action="store_true")
    sp = add("sweep-alpha", cmd_sweep_alpha, help="sweep the cycle mixture rate")
    sp.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--resume", action="store_true")
    add("report", cmd_report, plan=False, help="median table from completed runs")
    add("correlate", cmd_correlate, plan=False, help="rank correlations among metrics")
    add("plot-trajectories", cmd_plot, plan=False, help="score trajectory figures")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.fn(args)
    except (InvalidSpecError, InvalidInputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
