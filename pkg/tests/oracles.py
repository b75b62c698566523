"""Independent reference computations used by the tests."""
import numpy as np
from scipy import integrate


def _log_gauss(phi, omega):
    d = omega.shape[0]
    sign, logdet = np.linalg.slogdet(omega)
    maha = np.einsum("...i,ij,...j->...", phi, np.linalg.inv(omega), phi)
    return -0.5 * (d * np.log(2 * np.pi) + logdet + maha)


def quad_loglik(mu, omega, u1, v1, u2=None, v2=None, s=None):
    """log of the integral over phi of q(mu, phi) g(phi; Omega), by adaptive quadrature.

    With only (u1, v1) the random effect enters like mu (B = C); otherwise the
    conditional log-likelihood is mu'U1 + phi'U2 - (mu'V1 mu + 2 phi'S mu + phi'V2 phi)/2.
    """
    mu, omega = np.atleast_1d(mu).astype(float), np.atleast_2d(omega).astype(float)
    # logq and the Gaussian log-density accept a single phi or a batch (..., d)
    if u2 is None:
        def logq(phi):
            a = mu + phi
            return a @ u1 - 0.5 * np.einsum("...i,ij,...j->...", a, v1, a)
        v2_, w = v1, u1 - v1 @ mu
    else:
        def logq(phi):
            quad = mu @ v1 @ mu + 2 * phi @ (s @ mu) + np.einsum("...i,ij,...j->...", phi, v2, phi)
            return mu @ u1 + phi @ u2 - 0.5 * quad
        v2_, w = v2, u2 - s @ mu
    d = omega.shape[0]
    # substitute phi = mode + K z so the integrand is O(1) near z = 0
    prec = v2_ + np.linalg.inv(omega)
    mode = np.linalg.solve(prec, w)
    K = np.linalg.cholesky(np.linalg.inv(prec))
    jac = np.log(np.abs(np.linalg.det(K)))
    ref = logq(mode) + _log_gauss(mode, omega)

    def f(*z):
        phi = mode + K @ np.array(z)
        return np.exp(logq(phi) + _log_gauss(phi, omega) - ref)

    if d == 1:
        val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=0, epsrel=1e-12, limit=200)
    elif d == 2:
        # trapezoid rule on a wide grid; spectrally accurate for smooth, fast-decaying integrands
        z = np.linspace(-12, 12, 401)
        h = z[1] - z[0]
        zz = np.stack(np.meshgrid(z, z, indexing="ij"), axis=-1)
        phi = mode + zz @ K.T
        val = float(np.exp(logq(phi) + _log_gauss(phi, omega) - ref).sum() * h * h)
    else:
        raise ValueError("quadrature oracle supports d <= 2")
    return float(np.log(val) + ref + jac)


def fd_gradient(fn, x, h=1e-5):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        g.flat[j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def fd_omega_score(fn, omega, h=1e-5):
    """d fn / d Omega_jk for symmetric perturbations; off-diagonal entries are halved so that
    they match the entrywise (free-matrix) convention."""
    d = omega.shape[0]
    out = np.zeros((d, d))
    for j in range(d):
        for k in range(j + 1):
            e = np.zeros((d, d))
            e[j, k] = e[k, j] = h
            val = (fn(omega + e) - fn(omega - e)) / (2 * h)
            out[j, k] = out[k, j] = val if j == k else val / 2
    return out
