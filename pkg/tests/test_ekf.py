import numpy as np
import pytest

from hekf_kit import ekf
from hekf_kit.errors import ConfigurationError, NumericalFailure


def _cv_system(dt=0.1):
    F = np.array([[1.0, dt], [0.0, 1.0]])
    H = np.array([[1.0, 0.0]])
    Q = 1e-3 * np.array([[dt**3 / 3, dt**2 / 2], [dt**2 / 2, dt]])
    R = np.array([[0.25]])
    return F, H, Q, R


def test_single_step_matches_scalar_hand_calculation():
    # x' = x, y = x; prior N(1, 2), Q = 1, R = 3 -> predicted var 3, gain 0.5
    model = ekf.linear_model([[1.0]], [[1.0]])
    b = ekf.predict(model, ekf.GaussianBelief([1.0], [[2.0]]), None, np.array([[1.0]]))
    b = ekf.correct(model, b, [5.0], [[3.0]])
    assert b.mean[0] == pytest.approx(3.0, rel=1e-15)
    assert b.cov[0, 0] == pytest.approx(1.5, rel=1e-15)


def test_joseph_form_agrees_with_short_form_at_optimal_gain(rng):
    F, H, Q, R = _cv_system()
    model = ekf.linear_model(F, H)
    b1 = b2 = ekf.GaussianBelief([0.0, 1.0], np.diag([1.0, 0.5]))
    for y in rng.normal(size=50):
        b1 = ekf.correct(model, ekf.predict(model, b1, None, Q), [y], R)
        b2 = ekf.correct(model, ekf.predict(model, b2, None, Q), [y], R, joseph=True)
    np.testing.assert_allclose(b1.mean, b2.mean, rtol=1e-10)
    np.testing.assert_allclose(b1.cov, b2.cov, rtol=1e-8)


def test_numeric_jacobian_of_linear_map_is_exact(rng):
    A = rng.normal(size=(4, 4))
    _, J = ekf.numeric_jacobian(lambda X: X @ A.T, rng.normal(size=4))
    np.testing.assert_allclose(J, A, rtol=1e-8, atol=1e-9)


def test_numeric_jacobian_of_nonlinear_map():
    def f(X):
        return np.stack([np.sin(X[:, 0]) * X[:, 1], np.exp(X[:, 1])], axis=1)
    x = np.array([0.3, -0.7])
    _, J = ekf.numeric_jacobian(f, x)
    exact = np.array([[np.cos(0.3) * -0.7, np.sin(0.3)], [0.0, np.exp(-0.7)]])
    np.testing.assert_allclose(J, exact, rtol=1e-8, atol=1e-10)


def test_posterior_variance_never_exceeds_prior(rng):
    F, H, Q, R = _cv_system()
    model = ekf.linear_model(F, H)
    b = ekf.GaussianBelief([0.0, 0.0], np.eye(2))
    for y in rng.normal(size=100):
        prior = ekf.predict(model, b, None, Q)
        b = ekf.correct(model, prior, [y], R)
        assert np.all(b.variances <= prior.variances + 1e-15)
        ekf.check_covariance(b.cov)


def test_nees_of_consistent_filter_is_near_state_dimension(rng):
    F, H, Q, R = _cv_system()
    model = ekf.linear_model(F, H)
    L = np.linalg.cholesky(Q)
    x = np.zeros(2)
    b = ekf.GaussianBelief(rng.normal(size=2), np.eye(2))
    x = b.mean + rng.normal(size=2)  # truth drawn from the prior
    values = []
    for k in range(4000):
        x = F @ x + L @ rng.normal(size=2)
        y = H @ x + np.sqrt(R[0, 0]) * rng.normal(size=1)
        b = ekf.correct(model, ekf.predict(model, b, None, Q), y, R)
        if k > 100:
            values.append(ekf.nees(x - b.mean, b.cov))
    assert np.mean(values) == pytest.approx(2.0, rel=0.1)


def test_singular_innovation_covariance_raises():
    model = ekf.linear_model(np.eye(2), np.array([[1.0, 0.0], [1.0, 0.0]]))
    b = ekf.GaussianBelief([0.0, 0.0], np.diag([1.0, 1.0]))
    with pytest.raises(NumericalFailure):
        ekf.correct(model, b, [0.0, 0.0], np.zeros((2, 2)))


def test_badly_scaled_but_regular_innovation_is_accepted():
    model = ekf.linear_model(np.eye(2), np.eye(2))
    b = ekf.GaussianBelief([0.0, 0.0], np.diag([1e-6, 1e8]))
    out = ekf.correct(model, b, [1e-3, 1e4], np.diag([1e-10, 1e12]))
    assert np.all(np.isfinite(out.mean))


def test_invalid_covariances_raise():
    with pytest.raises(NumericalFailure):
        ekf.check_covariance(np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(NumericalFailure):
        ekf.check_covariance(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(NumericalFailure):
        ekf.check_covariance(np.array([[np.nan]]))
    with pytest.raises(ConfigurationError):
        ekf.GaussianBelief(np.zeros(2), np.eye(3))
