"""Reading and writing trajectories, parameters, fits and statistics."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np

from .errors import DimensionMismatchError
from .estimate import MleFit
from .model import Theta, Trajectory
from .suffstats import GeneralSuffStats, SuffStats

PathLike = Union[str, Path]


def fmt(x) -> str:
    """Shortest repr that round-trips a float exactly."""
    return repr(float(x))


def write_trajectories(path: PathLike, trajs: Sequence[Trajectory]) -> None:
    """Long-format CSV: subject_id, t, x_1..x_r, d_1..d_s."""
    if not trajs:
        raise ValueError("no trajectories to write")
    r = trajs[0].states.shape[1]
    s = trajs[0].covariates.shape[1]
    header = ["subject_id", "t"] + [f"x_{j + 1}" for j in range(r)] + [f"d_{j + 1}" for j in range(s)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for tr in trajs:
            if tr.states.shape[1] != r or tr.covariates.shape[1] != s:
                raise DimensionMismatchError("trajectories disagree on state or covariate dimension")
            for k in range(len(tr)):
                w.writerow([tr.subject_id, fmt(tr.times[k]), *map(fmt, tr.states[k]), *map(fmt, tr.covariates[k])])


def _parse_id(raw: str):
    try:
        return int(raw)
    except ValueError:
        return raw


def read_trajectories(path: PathLike) -> List[Trajectory]:
    """Inverse of :func:`write_trajectories`; subjects keep their order of first appearance."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header = rows[0]
    if header[:2] != ["subject_id", "t"]:
        raise ValueError("CSV must start with columns subject_id, t")
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    dcols = [i for i, h in enumerate(header) if h.startswith("d_")]
    groups: dict = {}
    for row in rows[1:]:
        if not row:
            continue
        groups.setdefault(_parse_id(row[0]), []).append(row)
    out = []
    for sid, rs in groups.items():
        a = np.array([[float(v) for v in row[1:]] for row in rs])
        t = a[:, 0]
        x = a[:, [i - 1 for i in xcols]]
        d = a[:, [i - 1 for i in dcols]] if dcols else np.zeros((len(t), 0))
        out.append(Trajectory(t, x, d, sid))
    return out


def write_json(path: PathLike, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: PathLike):
    with open(path) as fh:
        return json.load(fh)


def read_theta(path: PathLike) -> Theta:
    """Theta from JSON ``{"mu": [...], "omega": [[...]]}``; a bare ``theta_hat`` wrapper is accepted."""
    data = read_json(path)
    if "theta_hat" in data:
        data = data["theta_hat"]
    return Theta.from_dict(data)


def write_fit(path: PathLike, fit: MleFit, extra: dict = None) -> None:
    payload = fit.to_dict()
    if extra:
        payload.update(extra)
    write_json(path, payload)


def read_fit(path: PathLike) -> MleFit:
    return MleFit.from_dict(read_json(path))


def read_fits(paths: Iterable[PathLike]) -> List[MleFit]:
    return [read_fit(p) for p in paths]


def stats_to_dict(st) -> dict:
    if isinstance(st, SuffStats):
        return {"subject_id": st.subject_id, "scheme": st.scheme, "u": st.u.tolist(), "v": st.v.tolist()}
    return {"subject_id": st.subject_id, "scheme": st.scheme, "u1": st.u1.tolist(), "v1": st.v1.tolist(),
            "u2": st.u2.tolist(), "v2": st.v2.tolist(), "s": st.s.tolist()}


def stats_from_dict(data):
    if "u" in data:
        return SuffStats(data["u"], data["v"], data["subject_id"], data["scheme"])
    return GeneralSuffStats(data["u1"], data["v1"], data["u2"], data["v2"], data["s"],
                            data["subject_id"], data["scheme"])


def write_stats(path: PathLike, stats) -> None:
    write_json(path, [stats_to_dict(st) for st in stats])


def read_stats(path: PathLike):
    return [stats_from_dict(d) for d in read_json(path)]


def read_matrix_csv(path_or_text: str) -> np.ndarray:
    """A numeric matrix from a CSV file, or from inline text with ';' separating rows."""
    p = Path(path_or_text)
    if p.exists():
        text = p.read_text()
        lines = [ln for ln in text.splitlines() if ln.strip()]
    else:
        lines = [ln for ln in path_or_text.split(";") if ln.strip()]
    return np.array([[float(v) for v in ln.split(",")] for ln in lines])
