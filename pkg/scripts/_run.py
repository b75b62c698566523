"""Shared command-line plumbing for the experiment scripts."""
import argparse
import logging
import os
from pathlib import Path

from sdmem.harness import ExperimentPlan, emit_table, run_mc


def parser(description, replicates):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--replicates", "-M", type=int, default=replicates)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--fine-step", type=float, default=None, help="Euler step (model default 1e-4)")
    p.add_argument("--scheme", choices=("first", "ito"), default="first")
    p.add_argument("--independent", action="store_true", help="fresh paths per dt instead of thinning one path")
    p.add_argument("--out", type=Path, required=False)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(args, model, n_grid, dt_grid, default_out):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    plan = ExperimentPlan(model, n_grid, dt_grid, args.replicates, seed=args.seed, fine_step=args.fine_step,
                          scheme=args.scheme, shared_paths=not args.independent)
    out = args.out or Path("results") / default_out
    result = run_mc(plan, jobs=args.jobs, out_dir=out)
    print(emit_table(result.summaries)[0], end="")
    print(f"outputs in {out}")
    return result
