import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import simulate_stats
from sdmem import models
from sdmem.estimate import fit_mle
from sdmem.model import Theta
from sdmem.models import (FhnConfig, RegisteredModel, TransferConfig, describe_models, fhn_drift,
                          fhn_fixed_point, fhn_jacobian, fhn_original_drift, get_model, model_names,
                          original_scale, rate_matrix, register, reparametrize, stationary_mean,
                          transfer5_drift, transfer5_spec)


def _direct_rate_matrix(a):
    a1, a2, a3, a4, a5, a6 = a
    return np.array([
        [a1, 0, 0, 0, -a5],
        [-a1, a2, 0, 0, 0],
        [0, -a2, a3 + a6, 0, 0],
        [0, 0, -a3, a4, 0],
        [0, 0, 0, -a4, a5],
    ], dtype=float)


def test_transfer5_zero_state_zero_drift():
    A, C = transfer5_drift(0.0, np.zeros(5), 0.0)
    mu = TransferConfig().theta().mu
    np.testing.assert_array_equal(A + C @ mu, np.zeros(5))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_transfer5_drift_matches_direct_rate_matrix(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(5) * 5
    alpha = rng.uniform(0.1, 5.0, 6)
    beta = rng.standard_normal(5)
    D = float(rng.integers(0, 2))
    A, C = transfer5_drift(0.0, x, D)
    got = A + C @ np.concatenate([alpha, beta])
    ref = -_direct_rate_matrix(alpha) @ x + D * beta
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(rate_matrix(alpha), _direct_rate_matrix(alpha), rtol=0, atol=0)


def test_transfer5_effect_design_is_rate_block():
    spec = transfer5_spec()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 5))
    D = np.array([[0.0], [1.0], [0.0], [1.0]])
    full = spec.fixed(0.0, x, D)
    np.testing.assert_array_equal(spec.design(0.0, x, D), full[..., :6])
    assert not spec.shared_design


def test_transfer5_stationary_mean_and_stability():
    cfg = TransferConfig()
    m = stationary_mean(cfg.alpha_true, cfg.beta_true)
    np.testing.assert_allclose(m, [7.50, 4.25, 5.00, 8.00, 14.00], atol=5e-3)
    assert np.all(np.linalg.eigvals(rate_matrix(cfg.alpha_true)).real > 0)
    assert cfg.horizon == 15.0
    np.testing.assert_allclose(np.diag(cfg.omega_true), [0.25, 1.0, 1.0, 0.25, 0.09, 0.09])


def _window_mean(G, beta, a, b):
    # exact mean of X over [a, b] from X_0 = 0: m - G^-1 (e^{-Ga} - e^{-Gb}) m / (b - a)
    m = np.linalg.solve(G, beta)
    return m - np.linalg.solve(G, (expm(-G * a) - expm(-G * b)) @ m) / (b - a)


def test_transfer5_groups_separate_by_stationary_mean():
    """Long-run means of treated minus untreated subjects track each subject's G(alpha+phi)^-1 beta."""
    m = get_model("transfer5")
    _, pop = simulate_stats("transfer5", 20, 1e-2, horizon=200.0, seed=31)
    beta = m.theta_true.mu[6:]
    late = {0: [], 1: []}
    target = []
    for rs in pop:
        tr = rs.trajectory
        mask = tr.times >= 50.0
        group = int(tr.covariates[0, 0])
        late[group].append(tr.states[mask].mean(axis=0))
        if group == 1:
            target.append(_window_mean(rate_matrix(m.theta_true.mu[:6] + rs.phi), beta, 50.0, 200.0))
    diff = np.mean(late[1], axis=0) - np.mean(late[0], axis=0)
    np.testing.assert_allclose(diff, np.mean(target, axis=0), rtol=0.03)
    ref = np.array(late[0])
    se = ref.std(axis=0, ddof=1) / np.sqrt(len(ref))
    assert np.all(np.abs(ref.mean(axis=0)) < 4 * se)


def test_fhn_design_at_origin():
    A, C = fhn_drift(0.0, np.zeros(2))
    mu = FhnConfig().mu_reparam
    np.testing.assert_allclose(A + C @ mu, [5.0, 1.2], rtol=1e-15)


def test_fhn_matches_original_parametrization():
    rng = np.random.default_rng(77)
    for _ in range(100):
        x = rng.uniform(-2.5, 2.5, 2)
        eps, s, g, eta = rng.uniform(0.05, 1.0), rng.uniform(-1, 1), rng.uniform(0.5, 3), rng.uniform(-2, 2)
        A, C = fhn_drift(0.0, x)
        got = A + C @ reparametrize(eps, s, g, eta)
        np.testing.assert_allclose(got, fhn_original_drift(x, eps, s, g, eta), rtol=1e-12, atol=1e-12)


def test_fhn_config_values():
    cfg = FhnConfig()
    np.testing.assert_allclose(cfg.mu_reparam, [10.0, 5.0, 1.5, 1.2], rtol=1e-15)
    np.testing.assert_allclose(np.diag(cfg.omega_true), [2.25, 1.0, 0.04, 0.04])
    assert cfg.horizon == 20.0


def test_fhn_reparametrization_round_trip():
    back = original_scale(FhnConfig().mu_reparam)
    assert back["eps"] == pytest.approx(0.1, abs=1e-12)
    assert back["s"] == pytest.approx(0.5, abs=1e-12)
    assert back["gamma"] == 1.5 and back["eta"] == 1.2


def test_fhn_fixed_point_is_stable():
    mu = FhnConfig().mu_reparam
    xs = fhn_fixed_point(mu)
    A, C = fhn_drift(0.0, xs)
    np.testing.assert_allclose(A + C @ mu, 0.0, atol=1e-10)
    eig = np.linalg.eigvals(fhn_jacobian(xs, mu))
    assert np.all(eig.real < 0)


def test_fhn_jacobian_matches_finite_differences():
    mu = FhnConfig().mu_reparam
    x = np.array([0.3, -0.4])
    h = 1e-6
    num = np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fp = sum(fhn_drift(0, x + e)[k] @ mu if k else fhn_drift(0, x + e)[0] for k in (0, 1))
        fm = sum(fhn_drift(0, x - e)[k] @ mu if k else fhn_drift(0, x - e)[0] for k in (0, 1))
        num[:, j] = (fp - fm) / (2 * h)
    np.testing.assert_allclose(fhn_jacobian(x, mu), num, rtol=1e-7, atol=1e-7)


def test_fhn_report_on_both_scales():
    rep = get_model("fhn").report(FhnConfig().theta())
    assert rep["inv_eps"] == 10.0
    assert rep["eps"] == pytest.approx(0.1)
    assert rep["s"] == pytest.approx(0.5)
    assert rep["omega_1"] == pytest.approx(2.25)


def test_describe_models_lists_each_bundled_model():
    text = describe_models()
    for name in ("transfer5", "fhn", "ou"):
        assert text.count(f"{name}:") == 1
    assert "T=15" in text and "T=20" in text


def _linear_drift_model():
    ou = get_model("ou")
    return RegisteredModel(
        spec=ou.spec,
        theta_true=Theta([1.0], [[0.1]]),
        horizon=4.0,
        x0=np.array([2.0]),
        covariate_for=ou.covariate_for,
        mu_names=("k",),
        report=lambda th: {"k": float(th.mu[0])},
        fine_step=1e-2,
        description="user-registered decay",
    )


def test_register_user_model(monkeypatch):
    monkeypatch.setitem(models._REGISTRY, "decay", _linear_drift_model)
    assert "decay" in model_names()
    assert "user-registered decay" in describe_models()
    stats, _ = simulate_stats("decay", 40, 1e-2, seed=3)
    fit = fit_mle(stats)
    assert fit.converged
    assert abs(fit.theta_hat.mu[0] - 1.0) < 0.5


def test_register_function_and_unknown_name(monkeypatch):
    monkeypatch.setattr(models, "_REGISTRY", dict(models._REGISTRY))
    register("decay2", _linear_drift_model)
    assert get_model("decay2").mu_names == ("k",)
    with pytest.raises(KeyError, match="unknown model"):
        get_model("no-such-model")
