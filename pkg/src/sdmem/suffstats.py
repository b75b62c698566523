"""Discretized sufficient statistics of the linear-in-effects likelihood.

For B = C the pair (U, V) summarizes a path:

    U = sum_k C_k' Gamma_k^-1 (dX_k - A_k dt_k),    V = sum_k C_k' Gamma_k^-1 C_k dt_k

with every integrand evaluated at the left end of its interval. The general
quintet (U1, V1, U2, V2, S) carries a separate fixed-effect design B.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import MissingAntiderivativeError, NotPositiveDefiniteError, TooFewPointsError
from .model import ItoAntiderivative, ModelSpec, Trajectory, chol_gamma, inverse_from_chol

FIRST_ORDER = "first_order"
ITO = "ito_higher_order"
PSD_TOL = 1e-8


def _sym(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _check_psd(v, name):
    v = np.asarray(v)
    if v.size == 0:
        return
    scale = max(np.linalg.norm(v), 1e-300)
    lam = np.linalg.eigvalsh(v).min()
    if lam < -PSD_TOL * scale:
        raise NotPositiveDefiniteError(f"{name} has eigenvalue {lam:.3g} (not PSD)", min_eigenvalue=lam)


@dataclass(frozen=True)
class SuffStats:
    u: np.ndarray
    v: np.ndarray
    subject_id: Union[int, str] = 0
    scheme: str = FIRST_ORDER

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, float))
        v = _sym(np.atleast_2d(np.asarray(self.v, float)))
        if v.shape != (u.size, u.size):
            raise ValueError("v must be d x d with d = len(u)")
        _check_psd(v, "V")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    def as_general(self) -> "GeneralSuffStats":
        return GeneralSuffStats(self.u, self.v, self.u, self.v, self.v, self.subject_id, self.scheme)


@dataclass(frozen=True)
class GeneralSuffStats:
    u1: np.ndarray
    v1: np.ndarray
    u2: np.ndarray
    v2: np.ndarray
    s: np.ndarray
    subject_id: Union[int, str] = 0
    scheme: str = FIRST_ORDER

    def __post_init__(self):
        u1, u2 = (np.atleast_1d(np.asarray(a, float)) for a in (self.u1, self.u2))
        v1, v2 = (_sym(np.atleast_2d(np.asarray(a, float))) for a in (self.v1, self.v2))
        s = np.atleast_2d(np.asarray(self.s, float))
        p, d = u1.size, u2.size
        if v1.shape != (p, p) or v2.shape != (d, d) or s.shape != (d, p):
            raise ValueError("inconsistent quintet shapes")
        _check_psd(v1, "V1")
        _check_psd(v2, "V2")
        for name, val in (("u1", u1), ("v1", v1), ("u2", u2), ("v2", v2), ("s", s)):
            object.__setattr__(self, name, val)

    @property
    def p(self) -> int:
        return self.u1.size

    @property
    def d(self) -> int:
        return self.u2.size


def _increments(traj: Trajectory):
    if len(traj) < 2:
        raise TooFewPointsError("need at least two observations")
    t = traj.times[:-1]
    x = traj.states[:-1]
    D = traj.covariates[:-1]
    return t, x, D, np.diff(traj.times), np.diff(traj.states, axis=0)


def _gamma_inv_path(model: ModelSpec, t, x):
    """Gamma^-1 along the path; a single (r, r) matrix when the diffusion is constant."""
    if model.constant_diffusion:
        return inverse_from_chol(chol_gamma(model.gamma(t[:1], x[:1])))[0]
    return inverse_from_chol(chol_gamma(model.gamma(t, x)))


def _whitening(ginv):
    """K with K K' = Gamma^-1 (None when Gamma^-1 is the identity)."""
    if ginv.ndim == 2 and np.array_equal(ginv, np.eye(ginv.shape[0])):
        return None
    return np.linalg.cholesky(ginv)


def _whiten(Bx, K, dt):
    """sqrt(dt_k) K_k' Bx_k flattened to (n r, q), so that sums of products are one GEMM."""
    w = Bx * np.sqrt(dt)[:, None, None]
    if K is not None:
        w = np.swapaxes(K, -1, -2) @ w if K.ndim == 3 else np.einsum("ji,kjq->kiq", K, w, optimize=True)
    return w.reshape(-1, Bx.shape[-1])


def _lin(Ba, ginv, resid):
    """sum_k Ba_k' Gamma_k^-1 resid_k."""
    z = np.einsum("...ij,...j->...i", ginv, resid) if ginv.ndim == 3 else resid @ ginv.T
    return Ba.reshape(-1, Ba.shape[-1]).T @ z.reshape(-1)


def suffstats_first_order(model: ModelSpec, traj: Trajectory) -> SuffStats:
    """Left-point (U, V) for a model with B = C."""
    t, x, D, dt, dx = _increments(traj)
    ginv = _gamma_inv_path(model, t, x)
    C = model.design(t, x, D)
    resid = dx - model.offset(t, x, D) * dt[:, None]
    Cw = _whiten(C, _whitening(ginv), dt)
    return SuffStats(_lin(C, ginv, resid), _sym(Cw.T @ Cw), traj.subject_id, FIRST_ORDER)


def suffstats_general(model: ModelSpec, traj: Trajectory) -> GeneralSuffStats:
    """Left-point quintet (U1, V1, U2, V2, S) with B the fixed design and C the random design."""
    t, x, D, dt, dx = _increments(traj)
    ginv = _gamma_inv_path(model, t, x)
    B = model.fixed(t, x, D)
    C = model.design(t, x, D)
    resid = dx - model.offset(t, x, D) * dt[:, None]
    K = _whitening(ginv)
    Bw, Cw = _whiten(B, K, dt), _whiten(C, K, dt)
    return GeneralSuffStats(
        _lin(B, ginv, resid), _sym(Bw.T @ Bw),
        _lin(C, ginv, resid), _sym(Cw.T @ Cw),
        Cw.T @ Bw, traj.subject_id, FIRST_ORDER,
    )


def suffstats_ito(model: ModelSpec, traj: Trajectory, antiderivative: Optional[ItoAntiderivative] = None) -> SuffStats:
    """(U, V) with the stochastic integral replaced by its Ito-corrected telescoping form.

    On each interval, for h = grad_x H + remainder,

        int h dX ~ H(t_{k+1}, X_{k+1}) - H(t_k, X_k)
                   - dt_k [dH/dt + 1/2 tr(Hess H Gamma)](t_k, X_k) + remainder_k dX_k.

    V is the left-point sum as in the first-order scheme.
    """
    anti = model.ito if antiderivative is None else antiderivative
    if anti is None:
        raise MissingAntiderivativeError(f"model {model.name!r} has no Ito antiderivative")
    t, x, D, dt, dx = _increments(traj)
    t1, x1 = traj.times[1:], traj.states[1:]
    ginv = _gamma_inv_path(model, t, x)
    gamma = np.broadcast_to(model.gamma(t, x), (len(t),) + (model.state_dim,) * 2)
    C = model.design(t, x, D)
    A = model.offset(t, x, D)

    jump = np.asarray(anti.potential(t1, x1, D)) - np.asarray(anti.potential(t, x, D))
    hess = np.asarray(anti.hessian(t, x, D))
    drift_corr = 0.5 * np.einsum("kdij,kji->kd", hess, gamma)
    if anti.time_derivative is not None:
        drift_corr = drift_corr + np.asarray(anti.time_derivative(t, x, D))
    stoch = jump - drift_corr * dt[:, None]
    if anti.remainder is not None:
        stoch = stoch + np.einsum("kdr,kr->kd", np.asarray(anti.remainder(t, x, D)), dx)
    u = stoch.sum(axis=0) - _lin(C, ginv, A * dt[:, None])
    Cw = _whiten(C, _whitening(ginv), dt)
    return SuffStats(u, _sym(Cw.T @ Cw), traj.subject_id, ITO)


def compute_stats(model: ModelSpec, traj: Trajectory, scheme: str = "first"):
    """Statistics in the form the estimator needs for ``model``."""
    if scheme in ("ito", ITO):
        if not model.shared_design:
            raise MissingAntiderivativeError("Ito scheme is only available for models with B = C")
        return suffstats_ito(model, traj)
    if scheme not in ("first", FIRST_ORDER):
        raise ValueError(f"unknown scheme {scheme!r}")
    return suffstats_first_order(model, traj) if model.shared_design else suffstats_general(model, traj)


def compute_all(model: ModelSpec, trajs: Sequence[Trajectory], scheme: str = "first"):
    return [compute_stats(model, tr, scheme) for tr in trajs]


@dataclass
class ErrorStudy:
    steps: np.ndarray
    rms_u: np.ndarray
    rms_v: np.ndarray
    rms_total: np.ndarray
    slope: float
    reference_steps: int
    rows: list = field(default_factory=list)

    def ratios(self) -> np.ndarray:
        return self.rms_total[:-1] / self.rms_total[1:]


def discretization_error_study(model: ModelSpec, theta, steps, replicates: int, *, horizon: float = 1.0,
                               x0=None, reference_factor: int = 16, seed: int = 0, covariate=None) -> ErrorStudy:
    """RMS error of first-order (U^n, V^n) against the finest-grid statistics.

    One fine Euler path per replicate with ``reference_factor * max(steps)``
    intervals on ``[0, horizon]`` serves as the continuous-time proxy; each
    coarser grid subsamples the same path.
    """
    from .model import SubjectConfig, constant_covariate
    from .simulate import SimPlan, simulate_population

    steps = np.asarray(sorted(int(n) for n in steps))
    n_ref = int(reference_factor * steps.max())
    if any(n_ref % n for n in steps):
        raise ValueError("every n must divide the reference grid size")
    x0 = np.zeros(model.state_dim) if x0 is None else np.asarray(x0, float)
    track = covariate if covariate is not None else constant_covariate(np.zeros(model.covariate_dim))
    subj = SubjectConfig(x0, horizon, track)
    plan = SimPlan(horizon / n_ref, 1, replicates, seed, theta, subj)
    pop = simulate_population(model, plan)
    err_u = np.zeros((len(steps), replicates))
    err_v = np.zeros((len(steps), replicates))
    for m, rs in enumerate(pop):
        ref = compute_stats(model, rs.trajectory)
        ref_u, ref_v = _uv(ref)
        for j, n in enumerate(steps):
            st = compute_stats(model, rs.trajectory.thin(n_ref // n))
            u, v = _uv(st)
            err_u[j, m] = np.linalg.norm(u - ref_u)
            err_v[j, m] = np.linalg.norm(v - ref_v)
    rms_u = np.sqrt(np.mean(err_u**2, axis=1))
    rms_v = np.sqrt(np.mean(err_v**2, axis=1))
    rms_total = np.sqrt(np.mean(err_u**2 + err_v**2, axis=1))
    with np.errstate(divide="ignore"):
        if np.all(rms_total > 0):
            slope = float(np.polyfit(np.log(steps), np.log(rms_total), 1)[0])
        else:
            slope = float("nan")
    rows = [{"n": int(n), "rms_u": float(a), "rms_v": float(b), "rms_total": float(c)}
            for n, a, b, c in zip(steps, rms_u, rms_v, rms_total)]
    return ErrorStudy(steps, rms_u, rms_v, rms_total, slope, n_ref, rows)


def _uv(st):
    if isinstance(st, SuffStats):
        return st.u, st.v
    return np.concatenate([st.u1, st.u2]), np.block([[st.v1, st.s.T], [st.s, st.v2]])
