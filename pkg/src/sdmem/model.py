"""Model family, parameter and data containers.

A model is the linear-in-effects SDE

    dX = [A(t, X, D) + B(t, X, D) mu + C(t, X, D) phi] dt + Sigma(t, X) dW

with phi ~ N(0, Omega). When ``fixed_design`` is None, B is C and mu, phi share
dimension d.

Callbacks are evaluated on batches: ``t`` is a scalar or an array broadcasting
against the leading axes of ``x`` (shape ``(..., r)``) and ``D`` (shape
``(..., s)``). They return arrays of shape ``(..., r)`` for A, ``(..., r, d)`` for
C, ``(..., r, p)`` for B and ``(..., r, r)`` (or plain ``(r, r)``) for Sigma.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionMismatchError, NotPositiveDefiniteError, SingularGammaError

SYMMETRY_TOL = 1e-10
PIVOT_TOL = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ItoAntiderivative:
    """Gradient-type decomposition of the stochastic integrand h = C' Gamma^-1.

    ``potential(t, x, D)`` returns H with shape ``(..., d)`` and
    ``hessian(t, x, D)`` its state Hessians, shape ``(..., d, r, r)``, so that
    row c of h equals grad_x H_c + remainder_c. Rows that are not of gradient
    type go into ``remainder`` (shape ``(..., d, r)``) and are integrated with
    the left-point rule.
    """

    potential: Callable
    hessian: Callable
    time_derivative: Optional[Callable] = None
    remainder: Optional[Callable] = None


@dataclass(frozen=True)
class ModelSpec:
    name: str
    state_dim: int
    effect_dim: int
    drift_offset: Callable
    drift_design: Callable
    diffusion: Callable
    covariate_dim: int = 0
    fixed_design: Optional[Callable] = None
    fixed_dim: Optional[int] = None
    # True when Sigma depends on neither t nor x; lets the simulator hoist it.
    constant_diffusion: bool = False
    # drift_factory(mu, phi) -> f(t, x, D) for a batch of subjects (phi shape (N, d)).
    drift_factory: Optional[Callable] = None
    ito: Optional[ItoAntiderivative] = None

    def __post_init__(self):
        if self.state_dim < 1 or self.effect_dim < 1:
            raise DimensionMismatchError("state_dim and effect_dim must be positive")
        if self.covariate_dim < 0:
            raise DimensionMismatchError("covariate_dim must be nonnegative")
        if self.fixed_design is None:
            if self.fixed_dim not in (None, self.effect_dim):
                raise DimensionMismatchError("fixed_dim given without fixed_design")
            object.__setattr__(self, "fixed_dim", self.effect_dim)
        elif self.fixed_dim is None:
            raise DimensionMismatchError("fixed_design requires fixed_dim")

    @property
    def shared_design(self) -> bool:
        """True when random effects sit on every fixed-effect coordinate (B = C)."""
        return self.fixed_design is None

    def offset(self, t, x, D):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.drift_offset(t, x, D), x.shape)

    def design(self, t, x, D):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.drift_design(t, x, D), dtype=float)
        expected = x.shape + (self.effect_dim,)
        if out.shape != expected:
            raise DimensionMismatchError(f"drift_design returned {out.shape}, expected {expected}")
        return out

    def fixed(self, t, x, D):
        if self.fixed_design is None:
            return self.design(t, x, D)
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.fixed_design(t, x, D), dtype=float)
        expected = x.shape + (self.fixed_dim,)
        if out.shape != expected:
            raise DimensionMismatchError(f"fixed_design returned {out.shape}, expected {expected}")
        return out

    def sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        r = self.state_dim
        return np.broadcast_to(np.asarray(self.diffusion(t, x), dtype=float), x.shape[:-1] + (r, r))

    def gamma(self, t, x):
        s = self.sigma(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def make_drift(self, mu, phi):
        """Return f(t, x, D) evaluating the full drift for a batch of subjects."""
        if self.drift_factory is not None:
            return self.drift_factory(np.asarray(mu, float), np.asarray(phi, float))
        mu = np.asarray(mu, float)
        phi = np.atleast_2d(np.asarray(phi, float))

        def drift(t, x, D):
            out = self.offset(t, x, D) + self.fixed(t, x, D) @ mu
            return out + np.einsum("...rd,...d->...r", self.design(t, x, D), phi)

        return drift


@dataclass(frozen=True)
class Theta:
    """Fixed effect ``mu`` and random-effect covariance ``omega``."""

    mu: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        mu = _frozen(np.atleast_1d(self.mu))
        omega = _frozen(np.atleast_2d(self.omega))
        if mu.ndim != 1 or omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
            raise DimensionMismatchError("mu must be a vector and omega a square matrix")
        check_spd(omega, "omega")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "omega", omega)

    @property
    def d(self) -> int:
        return self.omega.shape[0]

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    def replace(self, mu=None, omega=None) -> "Theta":
        return Theta(self.mu if mu is None else mu, self.omega if omega is None else omega)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "omega": self.omega.tolist()}

    @classmethod
    def from_dict(cls, data) -> "Theta":
        return cls(np.asarray(data["mu"], float), np.asarray(data["omega"], float))


def check_spd(m, name="matrix"):
    """Raise unless ``m`` is symmetric within 1e-10 and strictly positive definite."""
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefiniteError(f"{name} has non-finite entries")
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
        raise NotPositiveDefiniteError(f"{name} is not symmetric")
    lam = np.linalg.eigvalsh(m).min()
    if lam <= 0:
        raise NotPositiveDefiniteError(
            f"{name} is not positive definite (smallest eigenvalue {lam:.3g})", min_eigenvalue=lam
        )


def validate_theta(theta: Theta, d: int, p: Optional[int] = None) -> None:
    """Check ``theta`` against effect dimension ``d`` (and fixed dimension ``p``)."""
    p = d if p is None else p
    if theta.omega.shape != (d, d):
        raise DimensionMismatchError(f"omega has shape {theta.omega.shape}, expected {(d, d)}")
    if theta.mu.shape != (p,):
        raise DimensionMismatchError(f"mu has shape {theta.mu.shape}, expected {(p,)}")
    check_spd(theta.omega, "omega")


def chol_gamma(gamma):
    """Batched Cholesky factor of Gamma with the relative pivot check."""
    gamma = np.asarray(gamma, dtype=float)
    try:
        L = np.linalg.cholesky(gamma)
    except np.linalg.LinAlgError as exc:
        raise SingularGammaError("Gamma = Sigma Sigma' is not positive definite") from exc
    piv = np.diagonal(L, axis1=-2, axis2=-1) ** 2
    scale = np.max(np.diagonal(gamma, axis1=-2, axis2=-1), axis=-1)
    if np.any(piv.min(axis=-1) < PIVOT_TOL * scale) or np.any(scale <= 0):
        raise SingularGammaError("Gamma = Sigma Sigma' is numerically singular")
    return L


def inverse_from_chol(L):
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape)
    Linv = np.linalg.solve(L, eye)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def gamma_inverse(model: ModelSpec, t, x) -> np.ndarray:
    """Gamma(t, x)^-1 for Gamma = Sigma Sigma', via Cholesky."""
    return inverse_from_chol(chol_gamma(model.gamma(t, np.asarray(x, float))))


CovariateTrack = Callable[[np.ndarray], np.ndarray]


def constant_covariate(value) -> CovariateTrack:
    value = np.atleast_1d(np.asarray(value, dtype=float))

    def track(t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(value, t.shape + value.shape).copy()

    return track


def piecewise_constant(breaks, values) -> CovariateTrack:
    """Right-continuous step function: ``values[k]`` on ``[breaks[k], breaks[k+1])``."""
    breaks = np.asarray(breaks, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(breaks) != len(values) or np.any(np.diff(breaks) <= 0):
        raise ValueError("breaks must be strictly increasing and match values")

    def track(t):
        idx = np.searchsorted(breaks, np.asarray(t, dtype=float), side="right") - 1
        return values[np.clip(idx, 0, len(values) - 1)]

    return track


@dataclass(frozen=True)
class SubjectConfig:
    x0: np.ndarray
    horizon: float
    covariate_track: CovariateTrack = field(default_factory=lambda: constant_covariate(np.zeros(0)))
    t0: float = 0.0
    grid: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "x0", _frozen(np.atleast_1d(self.x0)))
        if self.horizon <= self.t0:
            raise ValueError("horizon must exceed t0")
        if self.grid is not None:
            grid = _frozen(self.grid)
            if np.any(np.diff(grid) <= 0):
                raise ValueError("grid must be strictly increasing")
            if not np.isclose(grid[0], self.t0) or not np.isclose(grid[-1], self.horizon):
                raise ValueError("grid must start at t0 and end at horizon")
            object.__setattr__(self, "grid", grid)

    def covariates_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.asarray(self.covariate_track(t), dtype=float).reshape(t.shape[0], -1)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    covariates: np.ndarray
    subject_id: Union[int, str] = 0

    def __post_init__(self):
        times = _frozen(self.times)
        states = _frozen(self.states)
        if states.ndim == 1:
            states = _frozen(states[:, None])
        cov = np.asarray(self.covariates, dtype=float)
        if cov.size == 0:
            cov = np.zeros((len(times), 0))
        cov = _frozen(cov.reshape(len(times), -1) if cov.ndim < 2 else cov)
        if np.any(np.diff(times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if states.shape[0] != times.shape[0] or cov.shape[0] != times.shape[0]:
            raise DimensionMismatchError("states/covariates must have one row per time")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "covariates", cov)

    def __len__(self):
        return len(self.times)

    def thin(self, factor: int) -> "Trajectory":
        """Keep every ``factor``-th observation; the last time must land on the grid."""
        if (len(self.times) - 1) % factor:
            raise ValueError(f"{len(self.times) - 1} intervals not divisible by {factor}")
        sl = slice(None, None, factor)
        return Trajectory(self.times[sl], self.states[sl], self.covariates[sl], self.subject_id)

