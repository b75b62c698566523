"""Command-line entry point: simulate, estimate, wald, mc and --list-models."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SdmemError
from .estimate import fit_mle
from .harness import ExperimentPlan, emit_table, power_csv, run_mc, run_power_study
from .inference import OBSERVED_INFORMATION, REPLICATE_COVARIANCE, WaldSpec, beta_covariance, wald_test
from .io import (read_fit, read_matrix_csv, read_json, read_theta, read_trajectories, write_fit, write_json,
                 write_stats, write_trajectories)
from .model import SubjectConfig
from .models import describe_models, get_model
from .simulate import SimPlan, simulate_population
from .suffstats import compute_all


def _sidecar(out: Path) -> Path:
    return out.with_suffix(".json") if out.suffix == ".csv" else out.with_name(out.name + ".json")


def cmd_simulate(args) -> int:
    model = get_model(args.model)
    theta = read_theta(args.theta) if args.theta else model.theta_true
    horizon = args.t_end if args.t_end is not None else model.horizon
    dt_fine = args.dt_fine if args.dt_fine is not None else model.fine_step
    subjects = [SubjectConfig(model.x0, horizon, model.covariate_for(i)) for i in range(args.n)]
    plan = SimPlan(dt_fine, args.thin, args.n, args.seed, theta, subjects)
    pop = simulate_population(model.spec, plan)
    out = Path(args.out)
    write_trajectories(out, [rs.trajectory for rs in pop])
    write_json(_sidecar(out), {
        "model": args.model,
        "n_subjects": args.n,
        "dt_fine": dt_fine,
        "thin": args.thin,
        "dt_obs": plan.obs_step,
        "t_end": horizon,
        "seed": args.seed,
        "theta_true": theta.to_dict(),
        "phi": {str(rs.trajectory.subject_id): rs.phi.tolist() for rs in pop},
        "seed_streams": [list(rs.seed_stream) for rs in pop],
        "version": __version__,
    })
    print(f"wrote {len(pop)} subjects to {out}")
    return 0


def cmd_estimate(args) -> int:
    model = get_model(args.model)
    trajs = read_trajectories(args.data)
    stats = compute_all(model.spec, trajs, args.scheme)
    if args.dump_stats:
        write_stats(args.dump_stats, stats)
    init = None
    if args.init == "file":
        if not args.init_file:
            raise SystemExit("--init file requires --init-file PATH")
        init = read_theta(args.init_file)
    fit = fit_mle(stats, init, method=args.method, max_iter=args.max_iter)
    extra = {"model": args.model, "scheme": args.scheme, "mu_names": list(model.mu_names),
             "report": model.report(fit.theta_hat)}
    if model.beta_index is not None:
        extra["beta_index"] = list(model.beta_index)
    write_fit(args.out, fit, extra)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loglik", "score_norm"])
            for rec in fit.trace:
                w.writerow([rec["iteration"], repr(float(rec["loglik"])), repr(float(rec["score_norm"]))])
    status = "converged" if fit.converged else "NOT converged"
    if fit.boundary:
        status += " (singular Omega on the PSD boundary; no observed information)"
    print(f"{status} after {fit.iterations} iterations, loglik={fit.loglik:.6f}")
    return 0 if fit.converged else 3


def _selector(raw: str, fit_payload: dict):
    if raw in ("beta", None):
        idx = fit_payload.get("beta_index")
        if idx is None:
            raise SystemExit("--select beta needs a fit that records beta_index; pass indices instead")
        return idx
    return [int(v) for v in raw.split(",") if v.strip()]


def cmd_wald(args) -> int:
    if not args.fit and not args.fits_dir:
        raise SystemExit("need --fit or --fits-dir")
    fit_paths = sorted(Path(args.fits_dir).glob("*.json")) if args.fits_dir else []
    first = args.fit or (str(fit_paths[0]) if fit_paths else None)
    if first is None:
        raise SystemExit("no fits found")
    sel = _selector(args.select, read_json(first))
    L = read_matrix_csv(args.L) if args.L else None
    eta0 = read_matrix_csv(args.eta0).ravel() if args.eta0 else None
    source = REPLICATE_COVARIANCE if args.fits_dir else OBSERVED_INFORMATION
    spec = WaldSpec(sel, L, eta0, source)
    if args.fits_dir:
        fits = [read_fit(p) for p in fit_paths]
        cov = beta_covariance(fits, sel, REPLICATE_COVARIANCE)
        targets = [read_fit(args.fit)] if args.fit else fits
        results = [wald_test(f, spec, cov=cov, level=args.alpha).to_dict() for f in targets]
        if args.fit:
            print(json.dumps(results[0], indent=2))
        else:
            rate = float(np.mean([r["reject"] for r in results]))
            print(json.dumps({"n_fits": len(fits), "rejection_rate": rate, "results": results}, indent=2))
        return 0
    print(json.dumps(wald_test(read_fit(args.fit), spec, level=args.alpha).to_dict(), indent=2))
    return 0


def cmd_mc(args) -> int:
    raw = read_json(args.plan)
    plan = ExperimentPlan.from_dict(raw)
    out = Path(args.out or plan.output_dir or "mc_out")
    result = run_mc(plan, jobs=args.jobs, out_dir=out)
    print(emit_table(result.summaries)[0], end="")
    power = raw.get("power")
    if power:
        rows = run_power_study(plan, power["betas"], level=power.get("level", 0.05), jobs=args.jobs)
        (out / "power.csv").write_text(power_csv(rows))
        for r in rows:
            print(f"beta={list(r.beta)} rejection={r.rejection_rate:.3f} +/- {r.std_error:.3f} (n={r.n_used})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdmem", description="Simulation and maximum likelihood for SDE mixed-effects models")
    p.add_argument("--list-models", action="store_true", help="print bundled models and exit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("simulate", help="simulate a population to CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, required=True, help="number of subjects")
    s.add_argument("--dt-fine", type=float, default=None, help="Euler step (model default)")
    s.add_argument("--thin", type=int, default=1, help="keep every thin-th fine point")
    s.add_argument("--t-end", type=float, default=None, help="horizon (model default)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--theta", default=None, help="JSON file with mu and omega")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="fit (mu, Omega) to a trajectory CSV")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--scheme", choices=("first", "ito"), default="first")
    e.add_argument("--init", choices=("default", "file"), default="default")
    e.add_argument("--init-file", default=None)
    e.add_argument("--method", choices=("profile", "fixed_point"), default="profile")
    e.add_argument("--max-iter", type=int, default=500)
    e.add_argument("--out", required=True)
    e.add_argument("--dump-stats", default=None)
    e.add_argument("--trace", default=None)
    e.set_defaults(func=cmd_estimate)

    w = sub.add_parser("wald", help="Wald test of L beta = eta0")
    w.add_argument("--fit", default=None)
    w.add_argument("--fits-dir", default=None, help="directory of fit JSONs for replicate covariance")
    w.add_argument("--select", default="beta", help="comma-separated indices into mu, or 'beta'")
    w.add_argument("--L", default=None, help="CSV file (or inline rows separated by ';')")
    w.add_argument("--eta0", default=None)
    w.add_argument("--alpha", type=float, default=0.05)
    w.set_defaults(func=cmd_wald)

    m = sub.add_parser("mc", help="run a Monte Carlo plan")
    m.add_argument("--plan", required=True, help="JSON plan file")
    m.add_argument("--jobs", type=int, default=1)
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_mc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.list_models:
        print(describe_models())
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (SdmemError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
