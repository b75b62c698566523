"""Monte Carlo experiments over (N, dt) grids, bias/RMSE summaries and the Wald power study.

Replicate ``m`` of sample size ``N`` simulates from the stream
``(seed, N, m)``. In shared-path mode (the default) one fine path per subject is
thinned to every dt of the grid, so the columns of a table see the same data at
different observation frequencies. In independent mode the dt index is appended
to the stream key. Results are reduced in replicate order, so the output does
not depend on the number of workers.
"""
from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import reduce
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .errors import PlanError, SdmemError
from .estimate import fit_mle
from .inference import WaldSpec, wald_test
from .io import fmt
from .model import SubjectConfig, Theta
from .models import get_model
from .simulate import SimPlan, simulate_population
from .suffstats import compute_all

log = logging.getLogger(__name__)

FAILURE_FRACTION = 0.2
GRID_RTOL = 1e-9
META_COLUMNS = ("n_subjects", "dt", "replicate", "converged", "boundary", "iterations", "loglik", "score_norm")


@dataclass(frozen=True)
class ExperimentPlan:
    model: str
    n_grid: Tuple[int, ...]
    dt_grid: Tuple[float, ...]
    replicates: int
    seed: int = 0
    fine_step: Optional[float] = None  # model default when None
    theta_true: Optional[Theta] = None  # model default when None
    scheme: str = "first"
    method: str = "profile"
    shared_paths: bool = True
    max_iter: int = 500
    output_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "dt_grid", tuple(float(dt) for dt in self.dt_grid))
        if not self.n_grid or not self.dt_grid:
            raise PlanError("n_grid and dt_grid must be non-empty")
        if min(self.n_grid) < 2:
            raise PlanError("every N must be at least 2")
        if self.replicates < 1:
            raise PlanError("replicates must be positive")
        if self.scheme not in ("first", "ito"):
            raise PlanError(f"unknown scheme {self.scheme!r}")
        self.thin_factors()

    @property
    def registered(self):
        return get_model(self.model)

    @property
    def delta(self) -> float:
        return float(self.fine_step) if self.fine_step is not None else self.registered.fine_step

    @property
    def theta(self) -> Theta:
        return self.theta_true if self.theta_true is not None else self.registered.theta_true

    def thin_factors(self) -> Tuple[int, ...]:
        """b with dt = b * fine_step for each dt of the grid."""
        out = []
        for dt in self.dt_grid:
            b = int(round(dt / self.delta))
            if b < 1 or abs(b * self.delta - dt) > GRID_RTOL * dt:
                raise PlanError(f"dt={dt} is not an integer multiple of fine_step={self.delta}")
            out.append(b)
        return tuple(out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_grid"], d["dt_grid"] = list(self.n_grid), list(self.dt_grid)
        d["theta_true"] = self.theta.to_dict()
        d["fine_step"] = self.delta
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__) - {"power"}
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        data.pop("power", None)
        if data.get("theta_true") is not None:
            data["theta_true"] = Theta.from_dict(data["theta_true"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class McSummary:
    n_subjects: int
    dt: float
    params: Tuple[str, ...]
    truth: np.ndarray
    rel_bias: np.ndarray
    bias: np.ndarray
    rmse: np.ndarray
    n_converged: int
    n_failed: int
    estimates: Optional[np.ndarray] = None
    n_boundary: int = 0  # converged fits with singular Omega-hat, included in the summaries

    @property
    def cell_failed(self) -> bool:
        total = self.n_converged + self.n_failed
        return total > 0 and self.n_failed > FAILURE_FRACTION * total

    def row(self, name: str) -> Dict[str, float]:
        j = self.params.index(name)
        return {"truth": self.truth[j], "rel_bias": self.rel_bias[j], "bias": self.bias[j], "rmse": self.rmse[j]}


@dataclass
class McResult:
    plan: ExperimentPlan
    summaries: List[McSummary]
    replicates: List[dict]
    params: Tuple[str, ...]
    seeds: List[dict] = field(default_factory=list)

    def summary(self, n_subjects: int, dt: float) -> McSummary:
        for s in self.summaries:
            if s.n_subjects == n_subjects and math.isclose(s.dt, dt, rel_tol=1e-12):
                return s
        raise KeyError((n_subjects, dt))


# --------------------------------------------------------------------------- replicate work


def _subjects(model, n: int):
    return [SubjectConfig(model.x0, model.horizon, model.covariate_for(i)) for i in range(n)]


def _fit_row(model, trajs, plan: ExperimentPlan, n: int, dt: float, m: int) -> dict:
    row = {"n_subjects": n, "dt": dt, "replicate": m}
    try:
        stats = compute_all(model.spec, trajs, plan.scheme)
        fit = fit_mle(stats, method=plan.method, max_iter=plan.max_iter, information=False)
        row.update(converged=fit.converged, boundary=fit.boundary, iterations=fit.iterations,
                   loglik=fit.loglik, score_norm=fit.score_norm)
        row.update(model.report(fit.theta_hat))
        row["_mu"] = fit.theta_hat.mu.tolist()
    except (SdmemError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("replicate N=%d dt=%g m=%d failed: %s", n, dt, m, exc)
        row.update(converged=False, boundary=False, iterations=0, loglik=float("nan"), score_norm=float("nan"))
    return row


def run_replicate(plan: ExperimentPlan, n: int, m: int, stream_extra: Tuple[int, ...] = ()) -> List[dict]:
    """Simulate one population of size ``n`` and fit it at every dt of the plan."""
    model = plan.registered
    factors = plan.thin_factors()
    subjects = _subjects(model, n)
    rows = []
    if plan.shared_paths:
        base = reduce(math.gcd, factors)
        sim = SimPlan(plan.delta, base, n, plan.seed, plan.theta, subjects)
        pop = simulate_population(model.spec, sim, stream_key=(n, m) + stream_extra)
        for dt, b in zip(plan.dt_grid, factors):
            trajs = [rs.trajectory.thin(b // base) for rs in pop]
            rows.append(_fit_row(model, trajs, plan, n, dt, m))
    else:
        for j, (dt, b) in enumerate(zip(plan.dt_grid, factors)):
            sim = SimPlan(plan.delta, b, n, plan.seed, plan.theta, subjects)
            pop = simulate_population(model.spec, sim, stream_key=(n, m) + stream_extra + (j,))
            rows.append(_fit_row(model, [rs.trajectory for rs in pop], plan, n, dt, m))
    return rows


def _task(args):
    plan, n, m, extra = args
    return run_replicate(plan, n, m, extra)


def _map(tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_task, tasks, chunksize=1))


# --------------------------------------------------------------------------- summaries


def summarize(rows: Sequence[dict], params: Sequence[str], truth: Dict[str, float],
              n_subjects: int, dt: float) -> McSummary:
    """Relative bias and RMSE over converged replicates."""
    params = tuple(params)
    t = np.array([truth[p] for p in params], dtype=float)
    ok = [r for r in rows if r["converged"]]
    est = np.array([[r[p] for p in params] for r in ok], dtype=float).reshape(len(ok), len(params))
    if ok:
        err = est - t
        bias = err.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(t != 0, (err / np.where(t != 0, t, 1.0)).mean(axis=0), np.nan)
        rmse = np.sqrt((err**2).mean(axis=0))
    else:
        bias = rel = rmse = np.full(len(params), np.nan)
    n_boundary = sum(bool(r.get("boundary", False)) for r in ok)
    return McSummary(n_subjects, dt, params, t, rel, bias, rmse, len(ok), len(rows) - len(ok), est, n_boundary)


def run_mc(plan: ExperimentPlan, jobs: int = 1, out_dir=None) -> McResult:
    """All (N, dt) cells of ``plan``; writes the outputs when ``out_dir`` (or plan.output_dir) is set."""
    model = plan.registered
    truth = model.report(plan.theta)
    params = tuple(truth)
    tasks = [(plan, n, m, ()) for n in plan.n_grid for m in range(plan.replicates)]
    results = _map(tasks, jobs)
    rows = [row for chunk in results for row in chunk]
    summaries = []
    for n in plan.n_grid:
        for dt in plan.dt_grid:
            cell = [r for r in rows if r["n_subjects"] == n and r["dt"] == dt]
            s = summarize(cell, params, truth, n, dt)
            if s.cell_failed:
                log.warning("cell N=%d dt=%g: %d of %d replicates failed", n, dt, s.n_failed, len(cell))
            summaries.append(s)
    seeds = [{"seed": plan.seed, "spawn_key": [n, m]} for _, n, m, _ in tasks]
    result = McResult(plan, summaries, rows, params, seeds)
    target = out_dir if out_dir is not None else plan.output_dir
    if target is not None:
        write_outputs(result, target)
    return result


# --------------------------------------------------------------------------- output


def replicates_csv(rows: Sequence[dict], params: Sequence[str]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(META_COLUMNS) + list(params))
    for r in rows:
        meta = [r["n_subjects"], fmt(r["dt"]), r["replicate"], int(bool(r["converged"])),
                int(bool(r.get("boundary", False))), r["iterations"],
                fmt(r["loglik"]), fmt(r["score_norm"])]
        w.writerow(meta + [fmt(r.get(p, float("nan"))) for p in params])
    return buf.getvalue()


SUMMARY_COLUMNS = ("n_subjects", "dt", "param", "truth", "rel_bias", "bias", "rmse", "n_converged", "n_failed",
                   "n_boundary")


def summary_csv(summaries: Sequence[McSummary]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        for j, p in enumerate(s.params):
            w.writerow([s.n_subjects, fmt(s.dt), p, fmt(s.truth[j]), fmt(s.rel_bias[j]), fmt(s.bias[j]),
                        fmt(s.rmse[j]), s.n_converged, s.n_failed, s.n_boundary])
    return buf.getvalue()


def read_summary_csv(text: str) -> List[McSummary]:
    rows = list(csv.DictReader(_io.StringIO(text)))
    cells: Dict[tuple, list] = {}
    for r in rows:
        cells.setdefault((int(r["n_subjects"]), float(r["dt"])), []).append(r)
    out = []
    for (n, dt), rs in cells.items():
        col = lambda k: np.array([float(r[k]) for r in rs])  # noqa: E731
        out.append(McSummary(n, dt, tuple(r["param"] for r in rs), col("truth"), col("rel_bias"), col("bias"),
                             col("rmse"), int(rs[0]["n_converged"]), int(rs[0]["n_failed"]),
                             n_boundary=int(rs[0].get("n_boundary") or 0)))
    return out


def _column_label(s: McSummary, vary: str) -> str:
    return f"dt={s.dt:g}" if vary == "dt" else f"N={s.n_subjects}"


def emit_table(summaries: Sequence[McSummary], vary: Optional[str] = None) -> Tuple[str, str]:
    """Aligned text and wide CSV: one row per parameter, a (rel. bias, RMSE) pair per cell.

    ``vary`` picks the column label ("dt" or "N"); by default whichever varies.
    """
    summaries = list(summaries)
    if not summaries:
        return "parameter\n", "parameter\n"
    if vary is None:
        vary = "N" if len({s.n_subjects for s in summaries}) > 1 and len({s.dt for s in summaries}) == 1 else "dt"
    params = summaries[0].params
    labels = [_column_label(s, vary) for s in summaries]

    header = ["parameter", "truth"]
    for lab in labels:
        header += [f"rel_bias[{lab}]", f"rmse[{lab}]"]
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for j, p in enumerate(params):
        row = [p, fmt(summaries[0].truth[j])]
        for s in summaries:
            row += [fmt(s.rel_bias[j]), fmt(s.rmse[j])]
        w.writerow(row)

    width = max(len(p) for p in params) + 2
    top = " " * (width + 10) + "".join(f"{lab:^22}" for lab in labels)
    sub = f"{'parameter':<{width}}{'truth':>10}" + "".join(f"{'rel.bias':>11}{'RMSE':>11}" for _ in labels)
    lines = [top.rstrip(), sub]
    for j, p in enumerate(params):
        line = f"{p:<{width}}{summaries[0].truth[j]:>10.4g}"
        for s in summaries:
            line += f"{s.rel_bias[j]:>11.3f}{s.rmse[j]:>11.3f}"
        lines.append(line)
    conv = "".join(f"{f'{s.n_converged}/{s.n_converged + s.n_failed}':>22}" for s in summaries)
    lines.append(f"{'converged':<{width + 10}}{conv}")
    return "\n".join(lines) + "\n", buf.getvalue()


def read_table_csv(text: str) -> Dict[str, Dict[str, Tuple[float, float]]]:
    """{column label: {parameter: (rel_bias, rmse)}} from :func:`emit_table` CSV."""
    rows = list(csv.reader(_io.StringIO(text)))
    header = rows[0]
    labels = [h[len("rel_bias["):-1] for h in header[2::2]]
    out = {lab: {} for lab in labels}
    for r in rows[1:]:
        for k, lab in enumerate(labels):
            out[lab][r[0]] = (float(r[2 + 2 * k]), float(r[3 + 2 * k]))
    return out


def write_outputs(result: McResult, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text, _ = emit_table(result.summaries)
    paths = {
        "replicates": out / "replicates.csv",
        "summary": out / "summary.csv",
        "table": out / "table.txt",
        "manifest": out / "manifest.json",
    }
    paths["replicates"].write_text(replicates_csv(result.replicates, result.params))
    paths["summary"].write_text(summary_csv(result.summaries))
    paths["table"].write_text(text)
    manifest = {
        "plan": result.plan.to_dict(),
        "version": __version__,
        "seeds": result.seeds,
        "failed_cells": [[s.n_subjects, s.dt] for s in result.summaries if s.cell_failed],
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


# --------------------------------------------------------------------------- power study


@dataclass(frozen=True)
class PowerRow:
    beta: Tuple[float, ...]
    rejection_rate: float
    std_error: float
    n_used: int
    n_failed: int
    statistics: Tuple[float, ...] = ()


def run_power_study(plan: ExperimentPlan, beta_alternatives: Sequence[Sequence[float]], level: float = 0.05,
                    jobs: int = 1, eta0=None) -> List[PowerRow]:
    """Rejection rate of H0: beta = eta0 (default 0) with replicate covariance, per true beta.

    Uses the first N and dt of the plan. Alternative ``k`` draws from the
    streams ``(seed, N, m, k)``.
    """
    model = plan.registered
    if model.beta_index is None:
        raise PlanError(f"model {plan.model!r} has no treatment block")
    sel = list(model.beta_index)
    n, dt = plan.n_grid[0], plan.dt_grid[0]
    cell_plan = ExperimentPlan(plan.model, (n,), (dt,), plan.replicates, plan.seed, plan.delta, plan.theta,
                               plan.scheme, plan.method, plan.shared_paths, plan.max_iter)
    spec = WaldSpec(list(range(len(sel))), eta0=eta0)
    out = []
    for k, beta in enumerate(beta_alternatives):
        mu = plan.theta.mu.copy()
        mu[sel] = np.asarray(beta, float)
        alt = ExperimentPlan(**{**cell_plan.__dict__, "theta_true": plan.theta.replace(mu=mu)})
        tasks = [(alt, n, m, (k,)) for m in range(plan.replicates)]
        rows = [chunk[0] for chunk in _map(tasks, jobs)]
        ok = [r for r in rows if r["converged"]]
        betas = np.array([np.asarray(r["_mu"])[sel] for r in ok])
        stats = []
        if len(ok) > len(sel):
            cov = np.atleast_2d(np.cov(betas, rowvar=False))
            tests = [wald_test(b, spec, cov=cov, level=level) for b in betas]
            stats = [t.statistic for t in tests]
            rate = float(np.mean([t.reject for t in tests]))
            se = math.sqrt(rate * (1 - rate) / len(ok))
        else:
            log.warning("beta=%s: %d converged fits cannot give a nonsingular %dx%d covariance",
                        list(beta), len(ok), len(sel), len(sel))
            rate, se = float("nan"), float("nan")
        out.append(PowerRow(tuple(float(b) for b in beta), rate, se, len(ok), len(rows) - len(ok), tuple(stats)))
    return out


def power_csv(rows: Sequence[PowerRow]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta", "rejection_rate", "std_error", "n_used", "n_failed"])
    for r in rows:
        w.writerow([" ".join(fmt(b) for b in r.beta), fmt(r.rejection_rate), fmt(r.std_error), r.n_used, r.n_failed])
    return buf.getvalue()


__all__ = [
    "ExperimentPlan", "McSummary", "McResult", "PowerRow", "run_mc", "run_replicate", "run_power_study",
    "summarize", "emit_table", "read_table_csv", "summary_csv", "read_summary_csv", "replicates_csv",
    "write_outputs", "power_csv",
]
