"""Wald tests of linear restrictions on a fixed-effect subvector."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import RankDeficientError, SingularInformationError, TooFewReplicatesError
from .estimate import MleFit

OBSERVED_INFORMATION = "observed_information"
REPLICATE_COVARIANCE = "replicate_covariance"

_EPS = 1e-16
_TINY = 1e-300
_MAX_TERMS = 10000


def _gamma_series(a, x):
    """Lower regularized gamma P(a, x) by its power series (x < a + 1)."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_TERMS):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a, x):
    """Upper regularized gamma Q(a, x) by modified Lentz continued fraction (x >= a + 1)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_TERMS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammaincc(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_series(a, x))
    return _gamma_cf(a, x)


def chi2_sf(x: float, k: int) -> float:
    """P(chi2_k >= x)."""
    if k < 1:
        raise ValueError("degrees of freedom must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    return gammaincc(k / 2.0, x / 2.0)


@dataclass(frozen=True)
class WaldSpec:
    """H0: L beta = eta0 with beta = mu[selector] and L of shape (k, s)."""

    selector: Sequence[int]
    l_matrix: Optional[np.ndarray] = None
    eta0: Optional[np.ndarray] = None
    cov_source: str = OBSERVED_INFORMATION

    def __post_init__(self):
        sel = tuple(int(i) for i in self.selector)
        s = len(sel)
        L = np.eye(s) if self.l_matrix is None else np.atleast_2d(np.asarray(self.l_matrix, float))
        if L.shape[1] != s:
            raise RankDeficientError(f"L has {L.shape[1]} columns, beta has {s} entries")
        sv = np.linalg.svd(L, compute_uv=False)
        rank = int(np.sum(sv > 1e-10 * sv.max())) if sv.size and sv.max() > 0 else 0
        if rank != L.shape[0] or L.shape[0] > s:
            raise RankDeficientError(f"L has rank {rank}, needs {L.shape[0]}")
        eta = np.zeros(L.shape[0]) if self.eta0 is None else np.atleast_1d(np.asarray(self.eta0, float))
        if eta.shape != (L.shape[0],):
            raise RankDeficientError("eta0 must have one entry per restriction")
        if self.cov_source not in (OBSERVED_INFORMATION, REPLICATE_COVARIANCE):
            raise ValueError(f"unknown covariance source {self.cov_source!r}")
        object.__setattr__(self, "selector", sel)
        object.__setattr__(self, "l_matrix", L)
        object.__setattr__(self, "eta0", eta)

    @property
    def k(self) -> int:
        return self.l_matrix.shape[0]


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float
    reject_at_0_05: bool
    level: float = 0.05
    reject: bool = False

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value,
                "reject_at_0_05": self.reject_at_0_05, "level": self.level, "reject": self.reject}


def beta_covariance(fits: Union[MleFit, Sequence[MleFit]], selector: Sequence[int],
                    source: str = OBSERVED_INFORMATION) -> np.ndarray:
    """Covariance of beta-hat, from replicate fits or one fit's observed information."""
    sel = list(selector)
    if source == REPLICATE_COVARIANCE:
        fits = [fits] if isinstance(fits, MleFit) else list(fits)
        if len(fits) < 2:
            raise TooFewReplicatesError("replicate covariance needs at least two fits")
        betas = np.stack([f.theta_hat.mu[sel] for f in fits])
        return np.atleast_2d(np.cov(betas, rowvar=False))
    if source != OBSERVED_INFORMATION:
        raise ValueError(f"unknown covariance source {source!r}")
    fit = fits if isinstance(fits, MleFit) else fits[0]
    info = fit.observed_information
    if info is None:
        raise SingularInformationError("fit carries no observed information")
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError("observed information is singular") from exc
    if not np.all(np.isfinite(cov)):
        raise SingularInformationError("observed information is singular")
    return cov[np.ix_(sel, sel)]


def wald_statistic(beta_hat, cov, l_matrix, eta0) -> float:
    diff = l_matrix @ np.asarray(beta_hat, float) - eta0
    middle = l_matrix @ np.asarray(cov, float) @ l_matrix.T
    middle = 0.5 * (middle + middle.T)
    try:
        chol = np.linalg.cholesky(middle)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError("L V L' is not positive definite") from exc
    z = np.linalg.solve(chol, diff)
    return float(z @ z)


def wald_test(fit_or_beta, spec: WaldSpec, cov=None, level: float = 0.05) -> WaldResult:
    """W = (L b - eta0)' (L V L')^-1 (L b - eta0) against chi2 with k degrees of freedom.

    ``fit_or_beta`` is an :class:`MleFit` (beta taken by ``spec.selector``, V from
    its observed information unless ``cov`` is given) or a beta vector with ``cov``.
    """
    if isinstance(fit_or_beta, MleFit):
        beta = fit_or_beta.theta_hat.mu[list(spec.selector)]
        if cov is None:
            if spec.cov_source == REPLICATE_COVARIANCE:
                raise TooFewReplicatesError("replicate covariance must be supplied for a single fit")
            cov = beta_covariance(fit_or_beta, spec.selector, OBSERVED_INFORMATION)
    else:
        beta = np.atleast_1d(np.asarray(fit_or_beta, float))
        if cov is None:
            raise ValueError("cov is required with a raw beta vector")
    stat = max(wald_statistic(beta, np.atleast_2d(cov), spec.l_matrix, spec.eta0), 0.0)
    p = chi2_sf(stat, spec.k)
    return WaldResult(stat, spec.k, p, p < 0.05, level, p < level)
