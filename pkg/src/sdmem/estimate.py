"""Maximum-likelihood estimation of (mu, Omega).

mu is profiled out through its explicit generalized-least-squares solution, and
the profile log-likelihood is maximized over a log-Cholesky parametrization of
Omega with BFGS, using the analytic Omega-score as gradient. A damped EM-style
fixed-point iteration is available as a cross-check.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import partial
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize

from .errors import NotPositiveDefiniteError, SingularInformationError
from .likelihood import (
    Stats,
    StackedStats,
    _score_from_arrays,
    mu_given_omega,
    stack_stats,
    subject_arrays,
)
from .model import Theta

log = logging.getLogger(__name__)

SCORE_TOL = 1e-6  # per subject, sup norm
STEP_TOL = 1e-4
MAX_ITER = 500
INIT_FLOOR = 1e-4
INIT_SHRINK = 0.9
FD_STEP = 1e-5
OMEGA_SOFT_BOUNDS = (1e-6, 1e6)
STALL_WINDOW = 25  # BFGS iterations without relative log-likelihood gain before giving up
STALL_RTOL = 1e-10
EIG_FLOOR = 1e-12  # relative to the largest eigenvalue, for boundary fits
BOUNDARY_RTOL = 1e-8  # smallest/largest eigenvalue ratio that counts as singular Omega


# --------------------------------------------------------------------------- parametrization


def encode_omega(omega) -> np.ndarray:
    """Lower-triangular Cholesky entries with log-transformed diagonal."""
    L = np.linalg.cholesky(np.asarray(omega, dtype=float))
    d = L.shape[0]
    L = L.copy()
    L[np.diag_indices(d)] = np.log(np.diag(L))
    return L[np.tril_indices(d)]


def _unpack(theta_vec, d):
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = theta_vec
    L[np.diag_indices(d)] = np.exp(np.diag(L))
    return L


def decode_omega(theta_vec, d: Optional[int] = None) -> np.ndarray:
    theta_vec = np.asarray(theta_vec, dtype=float)
    if d is None:
        d = int(round((np.sqrt(8 * theta_vec.size + 1) - 1) / 2))
    L = _unpack(theta_vec, d)
    omega = L @ L.T
    return 0.5 * (omega + omega.T)


@dataclass(frozen=True)
class OmegaParam:
    values: np.ndarray

    @classmethod
    def from_omega(cls, omega) -> "OmegaParam":
        return cls(encode_omega(omega))

    @property
    def d(self) -> int:
        return int(round((np.sqrt(8 * len(self.values) + 1) - 1) / 2))

    @property
    def omega(self) -> np.ndarray:
        return decode_omega(self.values, self.d)


def vech_indices(d):
    return np.tril_indices(d)


# --------------------------------------------------------------------------- results


@dataclass
class MleFit:
    theta_hat: Theta
    loglik: float
    score_norm: float
    iterations: int
    converged: bool
    observed_information: Optional[np.ndarray]
    score_mu: np.ndarray = None
    score_omega: np.ndarray = None
    last_step: float = float("nan")
    message: str = ""
    method: str = "profile"
    trace: List[dict] = field(default_factory=list)
    n_subjects: int = 0
    boundary: bool = False

    def to_dict(self) -> dict:
        info = None if self.observed_information is None else self.observed_information.tolist()
        return {
            "theta_hat": self.theta_hat.to_dict(),
            "loglik": self.loglik,
            "score_norm": self.score_norm,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "last_step": self.last_step,
            "method": self.method,
            "message": self.message,
            "n_subjects": self.n_subjects,
            "boundary": bool(self.boundary),
            "observed_information": info,
        }

    @classmethod
    def from_dict(cls, data) -> "MleFit":
        info = data.get("observed_information")
        return cls(
            theta_hat=Theta.from_dict(data["theta_hat"]),
            loglik=data["loglik"],
            score_norm=data["score_norm"],
            iterations=data["iterations"],
            converged=data["converged"],
            observed_information=None if info is None else np.asarray(info, float),
            last_step=data.get("last_step", float("nan")),
            method=data.get("method", "profile"),
            message=data.get("message", ""),
            n_subjects=data.get("n_subjects", 0),
            boundary=data.get("boundary", False),
        )


# --------------------------------------------------------------------------- building blocks


def default_init(stats: Stats) -> Theta:
    """Moment-type starting value.

    mu0 is the mean of the per-subject estimates V^-1 U (pooled
    (sum V1)^-1 sum U1 when B differs from C). Omega0 is the sample
    covariance of the implied random effects, shrunk 10% toward its diagonal
    and with eigenvalues floored at 1e-4.
    """
    st = stack_stats(stats)
    if st.shared:
        cond = np.linalg.solve(st.v2, st.u2[..., None])[..., 0]
        mu0 = cond.mean(axis=0)
        phis = cond - mu0
    else:
        info = st.v1.sum(axis=0)
        try:
            mu0 = np.linalg.solve(info, st.u1.sum(axis=0))
        except np.linalg.LinAlgError as exc:
            raise SingularInformationError("pooled V1 is singular") from exc
        phis = np.linalg.solve(st.v2, (st.u2 - np.einsum("ndp,p->nd", st.s, mu0))[..., None])[..., 0]
    if st.n > 1:
        cov = np.atleast_2d(np.cov(phis, rowvar=False))
    else:
        cov = np.zeros((st.d, st.d))
    cov = INIT_SHRINK * cov + (1 - INIT_SHRINK) * np.diag(np.diag(cov))
    lam, vec = np.linalg.eigh(0.5 * (cov + cov.T))
    omega0 = (vec * np.maximum(lam, INIT_FLOOR)) @ vec.T
    return Theta(mu0, 0.5 * (omega0 + omega0.T))


def full_score(st: StackedStats, mu, omega, chol=None):
    a = subject_arrays(st, mu, omega, chol=chol)
    s_mu, s_om = _score_from_arrays(a)
    return float(a["loglik"].sum()), s_mu, s_om


def vech_score(s_mu, s_omega) -> np.ndarray:
    """Score over (mu, vech Omega); an off-diagonal coordinate moves both mirrored entries."""
    d = s_omega.shape[0]
    i, j = vech_indices(d)
    weights = np.where(i == j, 1.0, 2.0)
    return np.concatenate([s_mu, weights * s_omega[i, j]])


def observed_information(stats: Stats, theta: Theta, step: float = FD_STEP) -> np.ndarray:
    """Negative central-difference Jacobian of the score over (mu, vech Omega), symmetrized."""
    st = stack_stats(stats)
    p, d = st.p, st.d
    ii, jj = vech_indices(d)
    k = p + len(ii)
    J = np.zeros((k, k))
    for c in range(k):
        cols = []
        for sign in (1.0, -1.0):
            mu = theta.mu.copy()
            om = theta.omega.copy()
            if c < p:
                mu[c] += sign * step
            else:
                a, b = ii[c - p], jj[c - p]
                om[a, b] += sign * step
                if a != b:
                    om[b, a] += sign * step
            _, s_mu, s_om = full_score(st, mu, om)
            cols.append(vech_score(s_mu, s_om))
        J[:, c] = (cols[0] - cols[1]) / (2 * step)
    info = -0.5 * (J + J.T)
    return info


def _profile(st: StackedStats, params, basis=None):
    """Profile log-likelihood and its gradient in log-Cholesky coordinates.

    With ``basis`` U (d x r, orthonormal columns) the coordinates describe an
    r x r factor K and Omega = (U K)(U K)', a face of the PSD cone.
    """
    r = st.d if basis is None else basis.shape[1]
    K = _unpack(params, r)
    L = K if basis is None else basis @ K
    omega = L @ L.T
    omega = 0.5 * (omega + omega.T)
    mu = mu_given_omega(st, omega, L)
    ll, s_mu, s_om = full_score(st, mu, omega, L)
    s_face = s_om if basis is None else basis.T @ s_om @ basis
    dK = 2.0 * s_face @ K
    dK[np.diag_indices(r)] *= np.diag(K)
    grad = dK[np.tril_indices(r)]
    return ll, grad, mu, omega, s_mu, s_om


def _score_norm(s_mu, s_om):
    # the Omega block enters unhalved: sup |sum(-G + P P')| is the stationarity residual
    return float(max(np.max(np.abs(s_mu)), 2.0 * np.max(np.abs(s_om))))


def _stalled(trace, window=STALL_WINDOW):
    """True when the last ``window`` iterations gained no relative log-likelihood.

    A fit creeping toward a singular Omega behaves like this; stopping early
    leaves it unconverged without burning the whole iteration budget.
    """
    if len(trace) <= window:
        return False
    ll, old = trace[-1]["loglik"], trace[-1 - window]["loglik"]
    return ll - old <= STALL_RTOL * max(abs(ll), 1.0)


_FAILURES = (np.linalg.LinAlgError, NotPositiveDefiniteError, SingularInformationError)


def _optimize(st: StackedStats, x0, basis, max_iter: int, tol: float, trace: list):
    """BFGS on the profile objective, then a Newton polish if the score is still above tolerance."""
    n = st.n
    profile = partial(_profile, st, basis=basis)
    cache = {}
    iterates = [x0]

    def fun(x):
        key = x.tobytes()
        if key not in cache:
            try:
                ll, grad, *_ = profile(x)
            except _FAILURES:
                return np.inf, np.zeros_like(x)
            if not np.isfinite(ll):
                return np.inf, np.zeros_like(x)
            cache.clear()
            cache[key] = (-ll / n, -grad / n)
        return cache[key]

    def record(x):
        ll, grad, mu, om, s_mu, s_om = profile(x)
        norm = _score_norm(s_mu, s_om) if basis is None else float(np.max(np.abs(grad)))
        trace.append({"iteration": len(trace), "loglik": ll, "score_norm": norm})
        iterates.append(np.array(x))
        if norm >= tol * n and _stalled(trace):
            raise StopIteration

    ll, grad, mu, om, s_mu, s_om = profile(x0)
    trace.append({"iteration": len(trace), "loglik": ll, "score_norm": _score_norm(s_mu, s_om)})
    res = minimize(fun, x0, jac=True, method="BFGS", callback=record,
                   options={"gtol": tol * 1e-2, "maxiter": max_iter})
    x = res.x
    iterations = int(res.nit)

    def unresolved(grad, s_mu, s_om):
        if basis is None:
            return _score_norm(s_mu, s_om) >= tol * n
        return np.max(np.abs(grad)) >= tol * n * 1e-2

    ll, grad, mu, om, s_mu, s_om = profile(x)
    while unresolved(grad, s_mu, s_om) and iterations < max_iter:
        try:
            H = _fd_hessian(lambda y: profile(y)[1], x)
            direction = -np.linalg.solve(H, grad)
        except _FAILURES:
            break
        if direction @ grad <= 0:
            direction = grad / max(np.linalg.norm(grad), 1e-300)
        t = 1.0
        while t > 1e-8:
            y = x + t * direction
            try:
                ll_new = profile(y)[0]
            except _FAILURES:
                ll_new = -np.inf
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        x = y
        iterations += 1
        iterates.append(np.array(x))
        ll, grad, mu, om, s_mu, s_om = profile(x)
        trace.append({"iteration": len(trace), "loglik": ll, "score_norm": _score_norm(s_mu, s_om)})
        if _stalled(trace, STALL_WINDOW // 5):
            break
    last_step = float(np.linalg.norm(iterates[-1] - iterates[-2])) if len(iterates) > 1 else 0.0
    return x, mu, om, ll, s_mu, s_om, iterations, last_step, str(res.message)


def _range_basis(omega):
    """Orthonormal basis of the numerically nonzero eigenspace, or None if Omega is nonsingular."""
    lam, vec = np.linalg.eigh(omega)
    keep = lam > BOUNDARY_RTOL * lam.max()
    if keep.all() or not keep.any():
        return None
    return vec[:, keep]


def _fit_profile(st: StackedStats, init: Theta, max_iter: int, tol: float, trace: list):
    x, mu, om, ll, s_mu, s_om, iterations, last_step, message = _optimize(
        st, encode_omega(init.omega), None, max_iter, tol, trace)
    # Omega-hat collapsing onto a face of the PSD cone: maximize within that face, shrinking it
    # again if the face itself degenerates.
    basis = _range_basis(om)
    while basis is not None and iterations < max_iter:
        K = np.linalg.cholesky(basis.T @ om @ basis)
        K[np.diag_indices(K.shape[0])] = np.log(np.diag(K))
        try:
            x, mu_f, om_f, ll_f, s_mu_f, s_om_f, it, _, _ = _optimize(
                st, K[np.tril_indices(K.shape[0])], basis, max_iter - iterations, tol, trace)
        except _FAILURES:
            break
        iterations += it
        if ll_f < ll - 1e-12 * abs(ll):
            break
        mu, om, ll, s_mu, s_om = mu_f, om_f, ll_f, s_mu_f, s_om_f
        message = f"maximized on a rank-{basis.shape[1]} face"
        sub = _range_basis(basis.T @ om @ basis)
        basis = None if sub is None else basis @ sub
    return mu, om, ll, s_mu, s_om, iterations, last_step, message


def _fd_hessian(grad_fn, x, h=1e-6):
    k = len(x)
    H = np.zeros((k, k))
    for c in range(k):
        e = np.zeros(k)
        e[c] = h
        H[:, c] = (grad_fn(x + e) - grad_fn(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def _fit_fixed_point(st: StackedStats, init: Theta, max_iter: int, tol: float, trace: list, damping: float = 0.5):
    n = st.n
    omega = init.omega.copy()
    last_step = np.nan
    for it in range(1, max_iter + 1):
        mu = mu_given_omega(st, omega)
        a = subject_arrays(st, mu, omega)
        s_mu, s_om = _score_from_arrays(a)
        trace.append({"iteration": it - 1, "loglik": float(a["loglik"].sum()), "score_norm": _score_norm(s_mu, s_om)})
        if _score_norm(s_mu, s_om) < tol * n:
            return mu, omega, float(a["loglik"].sum()), s_mu, s_om, it - 1, last_step, "score tolerance reached"
        w = st.u2 - np.einsum("ndp,p->nd", st.s, mu)
        post_mean = np.einsum("nij,nj->ni", a["r"], w)
        em = (np.einsum("ni,nj->ij", post_mean, post_mean) + a["r"].sum(axis=0)) / n
        new = (1 - damping) * omega + damping * 0.5 * (em + em.T)
        last_step = float(np.max(np.abs(new - omega)))
        omega = new
    mu = mu_given_omega(st, omega)
    ll, s_mu, s_om = full_score(st, mu, omega)
    return mu, omega, ll, s_mu, s_om, max_iter, last_step, "maximum iterations reached"


def _boundary_kkt(s_mu, s_om, omega, bound):
    """First-order conditions for a maximum over PSD Omega with a singular maximizer.

    With S = sum(-G + P P') the unhalved Omega-score: S must be negative
    semidefinite (no PSD direction ascends) and S Omega = 0 (S lives on the
    null space of Omega). The mu-score must vanish as usual.
    """
    lam = np.linalg.eigvalsh(omega)
    if lam.min() > BOUNDARY_RTOL * lam.max():
        return False
    S = 2.0 * np.asarray(s_om)
    return bool(np.max(np.abs(s_mu)) < bound and np.linalg.eigvalsh(S).max() < bound
                and np.max(np.abs(S @ omega)) < bound)


def _lift_spectrum(omega):
    """Raise eigenvalues that rounding pushed to or below zero (boundary fits) to a tiny floor."""
    lam, vec = np.linalg.eigh(omega)
    floor = EIG_FLOOR * max(lam.max(), 1e-300)
    if lam.min() > floor:
        return omega
    lifted = (vec * np.maximum(lam, floor)) @ vec.T
    return 0.5 * (lifted + lifted.T)


def fit_mle(stats: Stats, init: Optional[Theta] = None, *, method: str = "profile", max_iter: int = MAX_ITER,
            tol: float = SCORE_TOL, n_starts: int = 1, jitter: float = 0.2, seed: int = 0,
            information: bool = True) -> MleFit:
    """Maximize the population log-likelihood over (mu, Omega).

    Converged fits satisfy ``max|score| < tol * N`` over both blocks, or, when
    the maximizer has singular Omega, the first-order conditions on the PSD
    cone (``boundary=True``; no observed information is attached then). With
    ``n_starts > 1`` the extra starts perturb the log-Cholesky coordinates of
    the initial Omega and the fit with the largest log-likelihood is returned.
    """
    st = stack_stats(stats)
    if st.n < 2:
        raise ValueError("Omega is not identifiable from a single subject (need N >= 2)")
    init = default_init(st) if init is None else init
    rng = np.random.default_rng(seed)
    starts = [init]
    for _ in range(n_starts - 1):
        x = encode_omega(init.omega) + jitter * rng.standard_normal(st.d * (st.d + 1) // 2)
        starts.append(Theta(init.mu, decode_omega(x, st.d)))

    best = None
    for start in starts:
        trace: list = []
        if method == "profile":
            out = _fit_profile(st, start, max_iter, tol, trace)
        elif method == "fixed_point":
            out = _fit_fixed_point(st, start, max(max_iter, 20000) if max_iter == MAX_ITER else max_iter, tol, trace)
        else:
            raise ValueError(f"unknown method {method!r}")
        mu, omega, ll, s_mu, s_om, iterations, last_step, message = out
        if best is None or ll > best[2]:
            best = (mu, omega, ll, s_mu, s_om, iterations, last_step, message, trace)

    mu, omega, ll, s_mu, s_om, iterations, last_step, message, trace = best
    omega = _lift_spectrum(0.5 * (omega + omega.T))
    norm = _score_norm(s_mu, s_om)
    converged = norm < tol * st.n and (not np.isfinite(last_step) or last_step < STEP_TOL)
    lam = np.linalg.eigvalsh(omega)
    if converged:
        # a vanishing full score at singular Omega is still a boundary point
        boundary = bool(lam.min() <= BOUNDARY_RTOL * lam.max())
    else:
        boundary = _boundary_kkt(s_mu, s_om, omega, tol * st.n)
    if boundary:
        message = "maximum on the boundary of the PSD cone (singular Omega)"
        converged = True
    theta = Theta(mu, omega)
    if not boundary and (lam.min() < OMEGA_SOFT_BOUNDS[0] or lam.max() > OMEGA_SOFT_BOUNDS[1]):
        warnings.warn(f"Omega eigenvalues {lam.min():.3g}..{lam.max():.3g} leave [1e-6, 1e6]", RuntimeWarning)
    info = None
    if information and not boundary:
        try:
            info = observed_information(st, theta)
        except (np.linalg.LinAlgError, NotPositiveDefiniteError, SingularInformationError) as exc:
            log.info("observed information unavailable: %s", exc)
    if not converged:
        log.info("fit did not converge: %s (score %.3g)", message, norm)
    return MleFit(theta, ll, norm, iterations, bool(converged), info, s_mu, s_om, last_step, message,
                  method, trace, st.n, boundary)
