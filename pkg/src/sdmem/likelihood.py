"""Closed-form subject and population log-likelihood and score.

Integrating the conditional likelihood against phi ~ N(0, Omega) gives, with
w = U2 - S mu and R = (V2 + Omega^-1)^-1,

    log p = mu'U1 - mu'V1 mu / 2 + w'R w / 2 - log det(I + V2 Omega) / 2.

For B = C this is evaluated in the equivalent residual form

    log p = -log det(I + V Omega) / 2 - (mu - V^-1 U)' G (mu - V^-1 U) / 2 + U'V^-1 U / 2

with G = (I + V Omega)^-1 V. Densities are relative to the law of the model at
the reference parameter, not to Lebesgue measure.

Both determinant and R come from the Cholesky factor L of Omega through the
symmetric matrix M = I + L'V L, so I + V Omega is never factorized directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import DimensionMismatchError, IdentifiabilityError, NotPositiveDefiniteError, SingularInformationError
from .model import Theta
from .suffstats import GeneralSuffStats, SuffStats

V_TOL = 1e-10
COND_MAX = 1e12


@dataclass(frozen=True)
class LikelihoodTerms:
    g: np.ndarray
    r: np.ndarray
    gamma: np.ndarray
    loglik: float


@dataclass(frozen=True)
class GeneralLikelihoodTerms:
    g: np.ndarray
    r: np.ndarray
    residual: np.ndarray  # P = (I + V2 Omega)^-1 (U2 - S mu)
    score_mu: np.ndarray
    loglik: float


@dataclass(frozen=True)
class StackedStats:
    """Per-subject statistics stacked along a leading subject axis."""

    u1: np.ndarray
    v1: np.ndarray
    u2: np.ndarray
    v2: np.ndarray
    s: np.ndarray
    shared: bool
    ids: tuple

    @property
    def n(self) -> int:
        return self.u1.shape[0]

    @property
    def p(self) -> int:
        return self.u1.shape[1]

    @property
    def d(self) -> int:
        return self.u2.shape[1]

    def subset(self, idx) -> "StackedStats":
        idx = np.asarray(idx)
        return StackedStats(self.u1[idx], self.v1[idx], self.u2[idx], self.v2[idx], self.s[idx],
                            self.shared, tuple(self.ids[i] for i in idx))


Stats = Union[Sequence[SuffStats], Sequence[GeneralSuffStats], StackedStats]


def stack_stats(stats: Stats) -> StackedStats:
    if isinstance(stats, StackedStats):
        return stats
    stats = list(stats)
    if not stats:
        raise ValueError("no subjects")
    if all(isinstance(st, SuffStats) for st in stats):
        u = np.stack([st.u for st in stats])
        v = np.stack([st.v for st in stats])
        d = u.shape[1]
        if v.shape[1:] != (d, d):
            raise DimensionMismatchError("subjects disagree on d")
        return StackedStats(u, v, u, v, v, True, tuple(st.subject_id for st in stats))
    if all(isinstance(st, GeneralSuffStats) for st in stats):
        return StackedStats(
            np.stack([st.u1 for st in stats]), np.stack([st.v1 for st in stats]),
            np.stack([st.u2 for st in stats]), np.stack([st.v2 for st in stats]),
            np.stack([st.s for st in stats]), False, tuple(st.subject_id for st in stats),
        )
    raise TypeError("statistics must be all SuffStats or all GeneralSuffStats")


def _check_dims(st: StackedStats, theta: Theta):
    if theta.omega.shape != (st.d, st.d) or theta.mu.shape != (st.p,):
        raise DimensionMismatchError(
            f"theta has p={theta.p}, d={theta.d}; statistics have p={st.p}, d={st.d}"
        )


def _omega_factor(omega):
    return np.linalg.cholesky(np.asarray(omega, dtype=float))


def _r_and_logdet(v2, L, ids):
    """R = (V2 + Omega^-1)^-1 and log det(I + V2 Omega), batched over subjects.

    Any factor Omega = L L' works, including a rectangular d x r one for
    rank-deficient Omega (R is then the limit of the formula).
    """
    M = np.eye(L.shape[1]) + L.T @ v2 @ L
    try:
        Lm = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        bad = [ids[i] for i in range(len(M)) if np.linalg.eigvalsh(M[i]).min() <= 0]
        raise NotPositiveDefiniteError(f"I + V Omega lost definiteness (subjects {bad}); numerical corruption")
    logdet = 2.0 * np.log(np.diagonal(Lm, axis1=-2, axis2=-1)).sum(axis=-1)
    X = np.linalg.solve(M, np.broadcast_to(L.T, M.shape[:-1] + L.T.shape[-1:]))
    R = L @ X
    return 0.5 * (R + np.swapaxes(R, -1, -2)), logdet


def _check_v(v, ids):
    lam = np.linalg.eigvalsh(v)
    scale = np.maximum(np.abs(lam).max(axis=-1), 1e-300)
    bad = np.flatnonzero(lam.min(axis=-1) <= V_TOL * scale)
    if bad.size:
        raise IdentifiabilityError(f"V is singular for subjects {[ids[i] for i in bad]}")


def _mv(a, b):
    return np.einsum("...ij,...j->...i", a, b)


def subject_arrays(st: StackedStats, mu, omega, include_constant: bool = True, chol=None) -> dict:
    """Per-subject likelihood ingredients as arrays with a leading subject axis.

    ``chol`` may supply the Cholesky factor of ``omega`` to skip refactorizing it.
    """
    mu = np.asarray(mu, dtype=float)
    L = _omega_factor(omega) if chol is None else chol
    R, logdet = _r_and_logdet(st.v2, L, st.ids)
    v2R = st.v2 @ R
    G = st.v2 - v2R @ st.v2
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    if st.shared:
        _check_v(st.v2, st.ids)
        cond = np.linalg.solve(st.v2, st.u2[..., None])[..., 0]
        diff = cond - mu
        gamma = _mv(G, diff)
        loglik = -0.5 * logdet - 0.5 * np.einsum("ni,ni->n", diff, gamma)
        if include_constant:
            loglik = loglik + 0.5 * np.einsum("ni,ni->n", st.u2, cond)
        return {"g": G, "r": R, "residual": gamma, "score_mu": gamma, "loglik": loglik, "logdet": logdet}
    w = st.u2 - _mv(st.s, mu)
    Rw = _mv(R, w)
    resid = w - _mv(st.v2, Rw)
    score_mu = st.u1 - _mv(st.v1, mu) - _mv(np.swapaxes(st.s, -1, -2), Rw)
    loglik = st.u1 @ mu - 0.5 * np.einsum("i,nij,j->n", mu, st.v1, mu) + 0.5 * np.einsum("ni,ni->n", w, Rw) - 0.5 * logdet
    return {"g": G, "r": R, "residual": resid, "score_mu": score_mu, "loglik": loglik, "logdet": logdet}


def subject_loglik(stats: SuffStats, theta: Theta, include_constant: bool = True) -> LikelihoodTerms:
    """G, R, gamma and log p for one subject of a B = C model.

    ``include_constant=False`` drops the theta-free term U'V^-1 U / 2.
    """
    st = stack_stats([stats])
    _check_dims(st, theta)
    a = subject_arrays(st, theta.mu, theta.omega, include_constant)
    return LikelihoodTerms(a["g"][0], a["r"][0], a["residual"][0], float(a["loglik"][0]))


def general_subject_loglik(stats: GeneralSuffStats, theta: Theta) -> GeneralLikelihoodTerms:
    st = stack_stats([stats])
    _check_dims(st, theta)
    a = subject_arrays(st, theta.mu, theta.omega)
    return GeneralLikelihoodTerms(a["g"][0], a["r"][0], a["residual"][0], a["score_mu"][0], float(a["loglik"][0]))


def population_loglik(stats: Stats, theta: Theta) -> float:
    """Sum of subject log-likelihoods, in subject order."""
    st = stack_stats(stats)
    _check_dims(st, theta)
    return float(np.sum(subject_arrays(st, theta.mu, theta.omega)["loglik"]))


def _score_from_arrays(a) -> Tuple[np.ndarray, np.ndarray]:
    P = a["residual"]
    s_omega = 0.5 * (np.einsum("ni,nj->ij", P, P) - a["g"].sum(axis=0))
    return a["score_mu"].sum(axis=0), 0.5 * (s_omega + s_omega.T)


def score(stats: Stats, theta: Theta) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of the population log-likelihood.

    Returns the mu-block and the Omega-block; the latter is the symmetric
    matrix (sum_i P P' - G) / 2, i.e. the derivative with respect to each
    entry of Omega treated as free (a symmetric perturbation of an
    off-diagonal pair therefore changes l_N by twice the entry).
    """
    st = stack_stats(stats)
    _check_dims(st, theta)
    return _score_from_arrays(subject_arrays(st, theta.mu, theta.omega))


def information_and_rhs(st: StackedStats, omega, chol=None):
    """sum_i (V1 - S'R S) and sum_i (U1 - S'R U2)."""
    L = _omega_factor(omega) if chol is None else chol
    R, _ = _r_and_logdet(st.v2, L, st.ids)
    sT = np.swapaxes(st.s, -1, -2)
    info = (st.v1 - sT @ R @ st.s).sum(axis=0)
    rhs = (st.u1 - _mv(sT @ R, st.u2)).sum(axis=0)
    return 0.5 * (info + info.T), rhs


def mu_given_omega(stats: Stats, omega, chol=None) -> np.ndarray:
    """Generalized least-squares fixed effect for a given Omega.

    For B = C this is [sum G_i]^-1 sum (I + V_i Omega)^-1 U_i.
    """
    st = stack_stats(stats)
    info, rhs = information_and_rhs(st, omega, chol)
    lam = np.linalg.eigvalsh(info)
    if lam.min() <= 0 or lam.max() / lam.min() > COND_MAX:
        raise SingularInformationError(f"pooled information is singular (eigenvalues {lam.min():.3g}..{lam.max():.3g})")
    return np.linalg.solve(info, rhs)
