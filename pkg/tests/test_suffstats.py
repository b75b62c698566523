import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdmem.errors import MissingAntiderivativeError, NotPositiveDefiniteError, TooFewPointsError
from sdmem.model import ItoAntiderivative, ModelSpec, SubjectConfig, Theta, Trajectory
from sdmem.models import get_model
from sdmem.simulate import SimPlan, simulate_population
from sdmem.suffstats import (GeneralSuffStats, SuffStats, compute_stats, discretization_error_study,
                             suffstats_first_order, suffstats_general, suffstats_ito)

ZERO_A = lambda t, x, D: np.zeros_like(x)  # noqa: E731


def _scalar(design, ito=None, sigma=1.0):
    return ModelSpec("scalar", 1, 1, ZERO_A, design, lambda t, x: np.array([[sigma]]), ito=ito)


def _path(n=200, seed=0, r=1, T=1.0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, T, n + 1)
    x = np.cumsum(np.vstack([np.zeros((1, r)), rng.standard_normal((n, r)) * np.sqrt(T / n)]), axis=0) + 0.3
    return Trajectory(t, x, np.zeros((n + 1, 0)))


def test_unit_model_telescopes():
    m = _scalar(lambda t, x, D: np.ones(x.shape + (1,)))
    tr = _path(T=2.5)
    s = suffstats_first_order(m, tr)
    assert s.u[0] == pytest.approx(tr.states[-1, 0] - tr.states[0, 0], abs=1e-12)
    assert s.v[0, 0] == pytest.approx(2.5, abs=1e-12)


def test_constant_path():
    m = get_model("fhn").spec
    x0 = np.array([0.4, -0.2])
    tr = Trajectory(np.linspace(0, 3, 31), np.tile(x0, (31, 1)), np.zeros((31, 0)))
    s = suffstats_first_order(m, tr)
    # A = (0, -z) so dX - A dt is nonzero on a constant path; use the oracle directly
    C = m.design(0.0, x0, None)
    ginv = np.linalg.inv(m.gamma(0.0, x0))
    np.testing.assert_allclose(s.v, 3.0 * C.T @ ginv @ C, atol=1e-12)
    np.testing.assert_allclose(s.u, -3.0 * C.T @ ginv @ m.offset(0.0, x0, None), atol=1e-12)


def test_constant_path_zero_offset():
    m = _scalar(lambda t, x, D: (2 * x)[..., None])
    tr = Trajectory(np.linspace(0, 3, 31), np.full(31, 0.5), np.zeros((31, 0)))
    s = suffstats_first_order(m, tr)
    assert s.u[0] == 0.0
    assert s.v[0, 0] == pytest.approx(3.0 * 1.0)


def test_too_few_points():
    m = _scalar(lambda t, x, D: np.ones(x.shape + (1,)))
    with pytest.raises(TooFewPointsError):
        suffstats_first_order(m, Trajectory([0.0], [[1.0]], np.zeros((1, 0))))


def _loop_quintet(m, tr):
    t, x, D = tr.times, tr.states, tr.covariates
    p, d = m.fixed_dim, m.effect_dim
    u1, v1, u2, v2, S = np.zeros(p), np.zeros((p, p)), np.zeros(d), np.zeros((d, d)), np.zeros((d, p))
    for k in range(len(t) - 1):
        dt = t[k + 1] - t[k]
        B = m.fixed(t[k], x[k], D[k])
        C = m.design(t[k], x[k], D[k])
        gi = np.linalg.inv(m.gamma(t[k], x[k]))
        res = x[k + 1] - x[k] - m.offset(t[k], x[k], D[k]) * dt
        u1 += B.T @ gi @ res
        v1 += B.T @ gi @ B * dt
        u2 += C.T @ gi @ res
        v2 += C.T @ gi @ C * dt
        S += C.T @ gi @ B * dt
    return u1, v1, u2, v2, S


def _random_linear_model(seed):
    rng = np.random.default_rng(seed)
    Wb = rng.standard_normal((2, 2, 3))
    Wc = rng.standard_normal((2, 2, 2))
    a = rng.standard_normal(2)

    def fixed(t, x, D):
        return np.einsum("rjp,...j->...rp", Wb, x) + 0.5

    def design(t, x, D):
        return np.einsum("rjd,...j->...rd", Wc, x) + np.sin(t)[..., None, None] if np.ndim(t) else \
            np.einsum("rjd,...j->...rd", Wc, x) + np.sin(t)

    def sigma(t, x):
        # state-dependent diagonal diffusion exercises the per-step Gamma path
        s = np.zeros(np.shape(x)[:-1] + (2, 2))
        s[..., 0, 0] = 1 + 0.3 * np.tanh(x[..., 0])
        s[..., 1, 1] = 0.7
        s[..., 1, 0] = 0.2
        return s

    return ModelSpec("lin", 2, 2, lambda t, x, D: np.broadcast_to(a, x.shape) * 1.0, design, sigma,
                     fixed_design=fixed, fixed_dim=3)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_general_matches_loop_oracle(seed):
    m = _random_linear_model(seed)
    tr = _path(n=150, seed=seed, r=2)
    q = suffstats_general(m, tr)
    for got, want in zip((q.u1, q.v1, q.u2, q.v2, q.s), _loop_quintet(m, tr)):
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_transfer5_quintet_matches_loop_oracle():
    from conftest import simulate_stats
    _, pop = simulate_stats("transfer5", 2, 1e-2, horizon=2.0, seed=3)
    m = get_model("transfer5").spec
    for rs in pop:
        q = compute_stats(m, rs.trajectory)
        for got, want in zip((q.u1, q.v1, q.u2, q.v2, q.s), _loop_quintet(m, rs.trajectory)):
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_general_collapses_when_b_equals_c():
    base = _random_linear_model(4)
    m = ModelSpec("same", 2, 2, base.drift_offset, base.drift_design, base.diffusion,
                  fixed_design=base.drift_design, fixed_dim=2)
    tr = _path(n=100, seed=4, r=2)
    q = suffstats_general(m, tr)
    np.testing.assert_allclose(q.u1, q.u2, atol=1e-12)
    np.testing.assert_allclose(q.v1, q.v2, atol=1e-12)
    np.testing.assert_allclose(q.s, q.v2, atol=1e-12)
    shared = ModelSpec("shared", 2, 2, base.drift_offset, base.drift_design, base.diffusion)
    s = suffstats_first_order(shared, tr)
    np.testing.assert_array_equal(s.u, q.u2)
    np.testing.assert_array_equal(s.v, q.v2)


def test_general_zero_fixed_design():
    base = _random_linear_model(5)
    m = ModelSpec("zeroB", 2, 2, base.drift_offset, base.drift_design, base.diffusion,
                  fixed_design=lambda t, x, D: np.zeros(np.shape(x) + (3,)), fixed_dim=3)
    q = suffstats_general(m, _path(n=50, seed=5, r=2))
    assert not q.u1.any() and not q.v1.any() and not q.s.any()


def test_suffstats_rejects_indefinite_v():
    with pytest.raises(NotPositiveDefiniteError):
        SuffStats([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ValueError):
        GeneralSuffStats([0.0], [[1.0]], [0.0, 0.0], np.eye(2), np.zeros((1, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 60))
def test_v_is_psd(seed, n):
    m = _random_linear_model(seed % 7)
    tr = _path(n=n, seed=seed, r=2)
    q = suffstats_general(m, tr)
    for v in (q.v1, q.v2):
        np.testing.assert_allclose(v, v.T, atol=1e-10 * max(1, np.abs(v).max()))
        assert np.linalg.eigvalsh(v).min() >= -1e-10 * np.linalg.norm(v)


def test_ito_constant_integrand_equals_first_order():
    c = 1.7
    ito = ItoAntiderivative(lambda t, x, D: c * x / 0.25,
                            lambda t, x, D: np.zeros(np.shape(x)[:-1] + (1, 1, 1)))
    m = _scalar(lambda t, x, D: np.full(np.shape(x) + (1,), c), ito=ito, sigma=0.5)
    tr = _path(seed=9)
    a, b = suffstats_ito(m, tr), suffstats_first_order(m, tr)
    np.testing.assert_allclose(a.u, b.u, rtol=1e-12)
    np.testing.assert_array_equal(a.v, b.v)


def test_ito_quadratic_potential_identity():
    ito = ItoAntiderivative(lambda t, x, D: x**2 / 2, lambda t, x, D: np.ones(np.shape(x)[:-1] + (1, 1, 1)))
    m = _scalar(lambda t, x, D: x[..., None], ito=ito)
    tr = _path(n=300, seed=2, T=3.0)
    x0, xT = tr.states[0, 0], tr.states[-1, 0]
    assert suffstats_ito(m, tr).u[0] == pytest.approx((xT**2 - x0**2) / 2 - 3.0 / 2, abs=1e-12)


def test_ito_requires_antiderivative():
    m = get_model("transfer5").spec
    tr = Trajectory(np.linspace(0, 1, 11), np.zeros((11, 5)), np.zeros((11, 1)))
    with pytest.raises(MissingAntiderivativeError):
        compute_stats(m, tr, "ito")
    with pytest.raises(MissingAntiderivativeError):
        suffstats_ito(_scalar(lambda t, x, D: x[..., None]), _path())


def test_fhn_ito_gradient_decomposition():
    # grad H + remainder must reproduce h = C' Gamma^-1 row by row
    m = get_model("fhn").spec
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 2))
    h = np.swapaxes(m.design(0.0, x, None), -1, -2) @ np.linalg.inv(m.gamma(0.0, x))
    eps = 1e-6
    grad = np.zeros_like(h)
    for j in range(2):
        e = np.zeros(2)
        e[j] = eps
        grad[..., j] = (m.ito.potential(0, x + e, None) - m.ito.potential(0, x - e, None)) / (2 * eps)
    np.testing.assert_allclose(grad + m.ito.remainder(0, x, None), h, atol=1e-7)
    eps = 1e-4
    hess_fd = (m.ito.potential(0, x + [eps, 0], None) - 2 * m.ito.potential(0, x, None)
               + m.ito.potential(0, x - [eps, 0], None)) / eps**2
    np.testing.assert_allclose(m.ito.hessian(0, x, None)[..., 0, 0], hess_fd, rtol=1e-5, atol=1e-5)


def test_fhn_ito_closer_to_fine_grid():
    m = get_model("fhn")
    subj = [SubjectConfig(m.x0, m.horizon) for _ in range(100)]
    pop = simulate_population(m.spec, SimPlan(1e-3, 1, 100, 31, m.theta_true, subj))
    wins = 0
    for rs in pop:
        fine = compute_stats(m.spec, rs.trajectory).u
        coarse = rs.trajectory.thin(100)
        e_ito = np.linalg.norm(compute_stats(m.spec, coarse, "ito").u - fine)
        e_first = np.linalg.norm(compute_stats(m.spec, coarse).u - fine)
        wins += e_ito <= e_first
    assert wins >= 80


def test_error_study_exact_model_is_zero():
    m = ModelSpec("bm", 1, 1, ZERO_A, lambda t, x, D: np.ones(np.shape(x) + (1,)), lambda t, x: np.eye(1))
    study = discretization_error_study(m, Theta([0.5], [[0.2]]), [10, 20, 40], 5, reference_factor=4)
    assert np.all(study.rms_total < 1e-12)


def test_error_study_rate_short():
    m = get_model("ou")
    study = discretization_error_study(m.spec, m.theta_true, [100, 200, 400, 800], 60, x0=m.x0, seed=1)
    assert -0.7 < study.slope < -0.3
    assert len(study.rows) == 4 and study.reference_steps == 16 * 800
