"""Bundled model families and their ground-truth settings.

* ``transfer5``: 5-compartment linear transfer model with a binary treatment
  covariate; random effects on the six rates, fixed treatment effect beta.
* ``fhn``: stochastic FitzHugh-Nagumo model in the rate parametrization
  mu = (1/eps, s/eps, gamma, eta).
* ``ou``: scalar Ornstein-Uhlenbeck model dX = -(mu + phi) X dt + sigma dW,
  used for moment and discretization checks.

Further models can be added with :func:`register`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .model import ItoAntiderivative, ModelSpec, Theta, constant_covariate


# --------------------------------------------------------------------------- transfer5

TRANSFER5_ALPHA = np.array([2.0, 4.0, 3.0, 2.0, 1.0, 1.0])
TRANSFER5_BETA = np.array([1.0, 2.0, 3.0, 1.0, -2.0])
TRANSFER5_OMEGA_DIAG = np.array([0.5, 1.0, 1.0, 0.5, 0.3, 0.3]) ** 2


def rate_matrix(alpha):
    """G(alpha) of the cascade, batched over leading axes of ``alpha``."""
    a = np.asarray(alpha, dtype=float)
    G = np.zeros(a.shape[:-1] + (5, 5))
    G[..., 0, 0] = a[..., 0]
    G[..., 0, 4] = -a[..., 4]
    G[..., 1, 0] = -a[..., 0]
    G[..., 1, 1] = a[..., 1]
    G[..., 2, 1] = -a[..., 1]
    G[..., 2, 2] = a[..., 2] + a[..., 5]
    G[..., 3, 2] = -a[..., 2]
    G[..., 3, 3] = a[..., 3]
    G[..., 4, 3] = -a[..., 3]
    G[..., 4, 4] = a[..., 4]
    return G


def _transfer5_offset(t, x, D):
    return np.zeros_like(x)


def _transfer5_rate_design(t, x, D):
    # column j is -(dG/dalpha_j) x
    C = np.zeros(x.shape + (6,))
    x1, x2, x3, x4, x5 = (x[..., k] for k in range(5))
    C[..., 0, 0], C[..., 1, 0] = -x1, x1
    C[..., 1, 1], C[..., 2, 1] = -x2, x2
    C[..., 2, 2], C[..., 3, 2] = -x3, x3
    C[..., 3, 3], C[..., 4, 3] = -x4, x4
    C[..., 0, 4], C[..., 4, 4] = x5, -x5
    C[..., 2, 5] = -x3
    return C


def _transfer5_full_design(t, x, D):
    D = np.asarray(D, dtype=float)
    treat = np.broadcast_to(D[..., :1], x.shape[:-1] + (1,))
    B = np.zeros(x.shape + (11,))
    B[..., :6] = _transfer5_rate_design(t, x, D)
    idx = np.arange(5)
    B[..., idx, 6 + idx] = treat
    return B


def _unit_diffusion(t, x, r):
    return np.eye(r)


def _transfer5_drift_factory(mu, phi):
    rates = rate_matrix(mu[:6] + np.atleast_2d(phi))
    beta = mu[6:]

    def drift(t, x, D):
        return D[..., :1] * beta - (rates @ x[..., None])[..., 0]

    return drift


def transfer5_drift(t, x, D):
    """Offset A and design matrix (rates then treatment columns) of transfer5."""
    x = np.asarray(x, dtype=float)
    D = np.atleast_1d(np.asarray(D, dtype=float))
    return _transfer5_offset(t, x, D), _transfer5_full_design(t, x, D)


def stationary_mean(alpha, beta):
    return np.linalg.solve(rate_matrix(alpha), beta)


@dataclass(frozen=True)
class TransferConfig:
    alpha_true: np.ndarray = field(default_factory=lambda: TRANSFER5_ALPHA.copy())
    beta_true: np.ndarray = field(default_factory=lambda: TRANSFER5_BETA.copy())
    omega_true: np.ndarray = field(default_factory=lambda: np.diag(TRANSFER5_OMEGA_DIAG))
    horizon: float = 15.0

    def theta(self, beta=None) -> Theta:
        beta = self.beta_true if beta is None else np.asarray(beta, float)
        return Theta(np.concatenate([self.alpha_true, beta]), self.omega_true)


def transfer5_spec() -> ModelSpec:
    return ModelSpec(
        name="transfer5",
        state_dim=5,
        effect_dim=6,
        covariate_dim=1,
        drift_offset=_transfer5_offset,
        drift_design=_transfer5_rate_design,
        fixed_design=_transfer5_full_design,
        fixed_dim=11,
        diffusion=partial(_unit_diffusion, r=5),
        constant_diffusion=True,
        drift_factory=_transfer5_drift_factory,
    )


def alternating_treatment(i: int):
    """Subjects alternate between reference (D=0) and treatment (D=1) groups."""
    return constant_covariate([float(i % 2)])


# --------------------------------------------------------------------------- FitzHugh-Nagumo


@dataclass(frozen=True)
class FhnConfig:
    eps: float = 0.1
    s_input: float = 0.5
    gamma_rec: float = 1.5
    eta: float = 1.2
    sigma1: float = 0.5
    sigma2: float = 0.3
    horizon: float = 20.0
    omega_diag: Tuple[float, ...] = (1.5**2, 1.0**2, 0.2**2, 0.2**2)

    @property
    def mu_reparam(self) -> np.ndarray:
        return reparametrize(self.eps, self.s_input, self.gamma_rec, self.eta)

    @property
    def omega_true(self) -> np.ndarray:
        return np.diag(self.omega_diag)

    def theta(self) -> Theta:
        return Theta(self.mu_reparam, self.omega_true)


def reparametrize(eps, s, gamma, eta) -> np.ndarray:
    return np.array([1.0 / eps, s / eps, gamma, eta])


def original_scale(mu) -> Dict[str, float]:
    """Map mu = (1/eps, s/eps, gamma, eta) back to (eps, s, gamma, eta)."""
    mu = np.asarray(mu, dtype=float)
    return {"eps": 1.0 / mu[0], "s": mu[1] / mu[0], "gamma": mu[2], "eta": mu[3]}


def _fhn_offset(t, x, D):
    A = np.zeros_like(x)
    A[..., 1] = -x[..., 1]
    return A


def _fhn_design(t, x, D):
    y, z = x[..., 0], x[..., 1]
    C = np.zeros(x.shape + (4,))
    C[..., 0, 0] = y - y**3 - z
    C[..., 0, 1] = 1.0
    C[..., 1, 2] = y
    C[..., 1, 3] = 1.0
    return C


def _diag_diffusion(t, x, sigma):
    return np.diag(sigma)


def _fhn_drift_factory(mu, phi):
    psi = mu + np.atleast_2d(phi)

    def drift(t, x, D):
        y, z = x[..., 0], x[..., 1]
        out = np.empty_like(x)
        out[..., 0] = psi[..., 0] * (y - y**3 - z) + psi[..., 1]
        out[..., 1] = psi[..., 2] * y - z + psi[..., 3]
        return out

    return drift


def fhn_drift(t, x):
    x = np.asarray(x, dtype=float)
    return _fhn_offset(t, x, None), _fhn_design(t, x, None)


def fhn_original_drift(x, eps, s, gamma, eta):
    """The FitzHugh-Nagumo drift in its original parametrization."""
    y, z = x[..., 0], x[..., 1]
    return np.stack([(y - y**3 - z + s) / eps, gamma * y - z + eta], axis=-1)


def _fhn_potential(t, x, D, s1, s2):
    y, z = x[..., 0], x[..., 1]
    H = np.zeros(x.shape[:-1] + (4,))
    H[..., 0] = (y**2 / 2 - y**4 / 4) / s1**2
    H[..., 1] = y / s1**2
    H[..., 3] = z / s2**2
    return H


def _fhn_hessian(t, x, D, s1, s2):
    y = x[..., 0]
    hess = np.zeros(x.shape[:-1] + (4, 2, 2))
    hess[..., 0, 0, 0] = (1 - 3 * y**2) / s1**2
    return hess


def _fhn_remainder(t, x, D, s1, s2):
    y, z = x[..., 0], x[..., 1]
    rem = np.zeros(x.shape[:-1] + (4, 2))
    rem[..., 0, 0] = -z / s1**2
    rem[..., 2, 1] = y / s2**2
    return rem


def fhn_spec(config: Optional[FhnConfig] = None) -> ModelSpec:
    cfg = FhnConfig() if config is None else config
    sig = (cfg.sigma1, cfg.sigma2)
    return ModelSpec(
        name="fhn",
        state_dim=2,
        effect_dim=4,
        drift_offset=_fhn_offset,
        drift_design=_fhn_design,
        diffusion=partial(_diag_diffusion, sigma=np.array(sig)),
        constant_diffusion=True,
        drift_factory=_fhn_drift_factory,
        ito=ItoAntiderivative(
            potential=partial(_fhn_potential, s1=sig[0], s2=sig[1]),
            hessian=partial(_fhn_hessian, s1=sig[0], s2=sig[1]),
            remainder=partial(_fhn_remainder, s1=sig[0], s2=sig[1]),
        ),
    )


def fhn_fixed_point(mu) -> np.ndarray:
    """Equilibrium of the noise-free system (unique for gamma > 1)."""
    a, b, g, e = np.asarray(mu, dtype=float)
    # z = g y + e; a (y - y^3 - g y - e) + b = 0
    roots = np.roots([-a, 0.0, a * (1 - g), b - a * e])
    y = roots[np.argmin(np.abs(roots.imag))].real
    return np.array([y, g * y + e])


def fhn_jacobian(x, mu) -> np.ndarray:
    a, _, g, _ = np.asarray(mu, dtype=float)
    y = x[0]
    return np.array([[a * (1 - 3 * y**2), -a], [g, -1.0]])


# --------------------------------------------------------------------------- scalar OU


def _ou_offset(t, x, D):
    return np.zeros_like(x)


def _ou_design(t, x, D):
    return -x[..., None]


def _ou_drift_factory(mu, phi):
    rate = (mu + np.atleast_2d(phi))[..., 0]

    def drift(t, x, D):
        return -rate[..., None] * x

    return drift


def _ou_potential(t, x, D, sigma):
    return -(x**2) / (2 * sigma**2)


def _ou_hessian(t, x, D, sigma):
    return np.full(x.shape[:-1] + (1, 1, 1), -1.0 / sigma**2)


def _scalar_diffusion(t, x, sigma):
    return np.array([[sigma]])


def ou_spec(sigma: float = 1.0) -> ModelSpec:
    return ModelSpec(
        name="ou",
        state_dim=1,
        effect_dim=1,
        drift_offset=_ou_offset,
        drift_design=_ou_design,
        diffusion=partial(_scalar_diffusion, sigma=sigma),
        constant_diffusion=True,
        drift_factory=_ou_drift_factory,
        ito=ItoAntiderivative(
            potential=partial(_ou_potential, sigma=sigma),
            hessian=partial(_ou_hessian, sigma=sigma),
        ),
    )


# --------------------------------------------------------------------------- registry


def _mu_report(names):
    def report(theta: Theta) -> Dict[str, float]:
        out = {n: float(v) for n, v in zip(names, theta.mu)}
        for j, v in enumerate(np.diag(theta.omega)):
            out[f"omega_{j + 1}"] = float(v)
        return out

    return report


def _fhn_report(theta: Theta) -> Dict[str, float]:
    out = {k: float(v) for k, v in original_scale(theta.mu).items()}
    out["inv_eps"] = float(theta.mu[0])
    out["s_over_eps"] = float(theta.mu[1])
    for j, v in enumerate(np.diag(theta.omega)):
        out[f"omega_{j + 1}"] = float(v)
    return out


@dataclass(frozen=True)
class RegisteredModel:
    """A model family bundled with the settings of its simulation study."""

    spec: ModelSpec
    theta_true: Theta
    horizon: float
    x0: np.ndarray
    covariate_for: Callable[[int], Callable]
    mu_names: Tuple[str, ...]
    report: Callable[[Theta], Dict[str, float]]
    fine_step: float = 1e-4
    beta_index: Optional[Tuple[int, ...]] = None
    description: str = ""


def _build_transfer5() -> RegisteredModel:
    names = tuple(f"alpha_{j}" for j in range(1, 7)) + tuple(f"beta_{j}" for j in range(1, 6))
    return RegisteredModel(
        spec=transfer5_spec(),
        theta_true=TransferConfig().theta(),
        horizon=15.0,
        x0=np.zeros(5),
        covariate_for=alternating_treatment,
        mu_names=names,
        report=_mu_report(names),
        beta_index=tuple(range(6, 11)),
        description="5-compartment linear transfer model, binary treatment covariate",
    )


def _no_covariate(i: int):
    return constant_covariate(np.zeros(0))


def _build_fhn() -> RegisteredModel:
    cfg = FhnConfig()
    return RegisteredModel(
        spec=fhn_spec(cfg),
        theta_true=cfg.theta(),
        horizon=cfg.horizon,
        x0=np.zeros(2),
        covariate_for=_no_covariate,
        mu_names=("inv_eps", "s_over_eps", "gamma", "eta"),
        report=_fhn_report,
        description="stochastic FitzHugh-Nagumo, mu = (1/eps, s/eps, gamma, eta)",
    )


def _build_ou() -> RegisteredModel:
    return RegisteredModel(
        spec=ou_spec(),
        theta_true=Theta([2.0], [[0.25]]),
        horizon=5.0,
        x0=np.ones(1),
        covariate_for=_no_covariate,
        mu_names=("rate",),
        report=_mu_report(("rate",)),
        fine_step=1e-3,
        description="scalar OU dX = -(mu + phi) X dt + dW",
    )


_REGISTRY: Dict[str, Callable[[], RegisteredModel]] = {
    "transfer5": _build_transfer5,
    "fhn": _build_fhn,
    "ou": _build_ou,
}


def register(name: str, factory: Callable[[], RegisteredModel]) -> None:
    """Make a user model available by name (factory must be importable in workers)."""
    _REGISTRY[name] = factory


def get_model(name: str) -> RegisteredModel:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(_REGISTRY)}") from None


def model_names():
    return sorted(_REGISTRY)


def describe_models() -> str:
    lines = []
    for name in model_names():
        m = get_model(name)
        s = m.spec
        lines.append(
            f"{name}: r={s.state_dim} p={s.fixed_dim} d={s.effect_dim} s={s.covariate_dim} "
            f"T={m.horizon:g}  {m.description}"
        )
        lines.append(f"  mu_true = {np.array2string(m.theta_true.mu, precision=4)}")
        lines.append(f"  diag(omega_true) = {np.array2string(np.diag(m.theta_true.omega), precision=4)}")
    return "\n".join(lines)
