import math

import numpy as np
import pytest
from scipy import optimize

import gp
from errors import ContractError


def _naive_kernel(A, B, theta):
    K = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            K[i, j] = theta.signal_var * math.exp(-0.5 * np.sum(((a - b) / theta.lengthscales) ** 2))
    return K


def _dense_posterior(X, y, theta, xs):
    """Posterior by dense inversion, de-standardized the same way as gp."""
    y_std_units, mu, sd = gp.standardize(np.asarray(y, dtype=np.float64))
    K = _naive_kernel(X, X, theta) + theta.noise_var * np.eye(len(X))
    k = _naive_kernel(X, xs, theta)
    Kinv = np.linalg.inv(K)
    mean = k.T @ Kinv @ y_std_units
    var = theta.signal_var - np.einsum("ij,ik,kj->j", k, Kinv, k)
    return mu + sd * mean, var * sd ** 2


def _toy_data(rng, n=12, dim=2):
    X = rng.uniform(-2, 2, size=(n, dim))
    y = np.sin(X[:, 0]) + 0.5 * np.cos(2 * X[:, 1]) + 0.05 * rng.standard_normal(n)
    return X, y


@pytest.fixture
def theta2():
    return gp.KernelHyperparams(np.log([0.8, 1.3]), math.log(1.5), math.log(0.05))


def test_kernel_matches_naive(rng, theta2):
    A = rng.normal(size=(6, 2))
    B = rng.normal(size=(4, 2))
    np.testing.assert_allclose(gp.kernel_matrix(A, B, theta2), _naive_kernel(A, B, theta2), atol=1e-12)


def test_kernel_dimension_mismatch(theta2):
    with pytest.raises(ContractError):
        gp.kernel_matrix(np.zeros((2, 3)), np.zeros((2, 3)), theta2)


def test_standardize():
    y, mu, sd = gp.standardize(np.array([1.0, 3.0]))
    np.testing.assert_allclose(y, [-1.0, 1.0])
    assert (mu, sd) == (2.0, 1.0)

    single, mu, sd = gp.standardize(np.array([0.7]))
    assert single[0] == 0.7 and mu == 0.0 and sd == 1.0


def test_posterior_matches_dense_solve(rng, theta2):
    X, y = _toy_data(rng)
    state = gp.build_state(X, y, theta2)
    xs = rng.uniform(-2, 2, size=(5, 2))
    mean, var = gp.posterior_batch(state, xs)
    d_mean, d_var = _dense_posterior(X, y, theta2, xs)
    np.testing.assert_allclose(mean, d_mean, atol=1e-8)
    np.testing.assert_allclose(var, d_var, atol=1e-8)


def test_posterior_single_point_matches_batch(rng, theta2):
    X, y = _toy_data(rng)
    state = gp.build_state(X, y, theta2)
    x = np.array([0.3, -0.4])
    post = gp.posterior(state, x)
    mean, var = gp.posterior_batch(state, x[None, :])
    assert post.mean == pytest.approx(mean[0], abs=1e-14)
    assert post.variance == pytest.approx(var[0], abs=1e-14)


def test_posterior_interpolates_with_tiny_noise(rng):
    X, y = _toy_data(rng, n=8)
    theta = gp.KernelHyperparams(np.log([1.0, 1.0]), 0.0, math.log(1e-6))
    state = gp.build_state(X, y, theta)
    mean, var = gp.posterior_batch(state, X)
    np.testing.assert_allclose(mean, y, atol=1e-2)
    assert np.all(var >= 0)
    assert np.all(var < 1e-4)


def test_far_query_reverts_to_prior(rng, theta2):
    X, y = _toy_data(rng)
    state = gp.build_state(X, y, theta2)
    post = gp.posterior(state, [100.0, 100.0])
    assert post.mean == pytest.approx(state.y_mean, abs=1e-9)
    assert post.variance == pytest.approx(theta2.signal_var * state.y_std ** 2, rel=1e-9)


def test_single_observation_posterior():
    theta = gp.KernelHyperparams.default(2)
    state = gp.build_state(np.zeros((1, 2)), [0.4], theta)
    post = gp.posterior(state, [0.0, 0.0])
    expected = 0.4 / (1.0 + theta.noise_var + state.jitter)
    assert post.mean == pytest.approx(expected, rel=1e-9)


def test_duplicate_points_factorize(theta2):
    X = np.zeros((5, 2))
    theta = gp.KernelHyperparams(theta2.log_lengthscales, 0.0, math.log(1e-6))
    state = gp.build_state(X, [0.1, 0.2, 0.3, 0.2, 0.1], theta)
    assert np.all(np.isfinite(state.chol))
    assert state.jitter in gp.JITTER_LADDER


def test_build_state_rejects_bad_input():
    with pytest.raises(ContractError):
        gp.build_state(np.zeros((3, 2)), [1.0, 2.0])
    with pytest.raises(ContractError):
        gp.build_state(np.zeros((2, 2)), [1.0, np.inf])


def test_lml_matches_dense_formula(rng, theta2):
    X, y = _toy_data(rng)
    state = gp.build_state(X, y, theta2)
    K = _naive_kernel(X, X, theta2) + (theta2.noise_var + state.jitter) * np.eye(len(X))
    _, logdet = np.linalg.slogdet(K)
    expected = (-0.5 * state.y @ np.linalg.solve(K, state.y) - 0.5 * logdet
                - 0.5 * len(X) * math.log(2 * math.pi))
    assert gp.log_marginal_likelihood(state) == pytest.approx(expected, abs=1e-8)


def test_lml_gradient_matches_finite_differences(rng, theta2):
    X, y = _toy_data(rng)
    state = gp.build_state(X, y, theta2)
    grad = gp.lml_gradient(state)
    vec = theta2.to_vector()
    h = 1e-6
    for i in range(len(vec)):
        up, down = vec.copy(), vec.copy()
        up[i] += h
        down[i] -= h
        f_up = gp.log_marginal_likelihood(gp.build_state(X, y, gp.KernelHyperparams.from_vector(up)))
        f_down = gp.log_marginal_likelihood(gp.build_state(X, y, gp.KernelHyperparams.from_vector(down)))
        assert grad[i] == pytest.approx((f_up - f_down) / (2 * h), rel=1e-4, abs=1e-6)


def test_fit_never_decreases_lml(rng):
    X, y = _toy_data(rng, n=20)
    start = gp.build_state(X, y)
    fitted = gp.fit_hyperparameters(start, iterations=50, step=0.1)
    assert gp.log_marginal_likelihood(fitted) >= gp.log_marginal_likelihood(start)


@pytest.mark.slow
def test_fit_approaches_lbfgs_optimum(rng):
    X, y = _toy_data(rng, n=25)
    fitted = gp.fit_hyperparameters(gp.build_state(X, y), iterations=400, step=0.05)

    bounds = [gp.LOG_LENGTHSCALE_BOUNDS] * 2 + [gp.LOG_SIGNAL_VAR_BOUNDS, gp.LOG_NOISE_VAR_BOUNDS]

    def neg(vec):
        s = gp.build_state(X, y, gp.KernelHyperparams.from_vector(vec))
        return -gp.log_marginal_likelihood(s), -gp.lml_gradient(s)

    ref = optimize.minimize(neg, gp.KernelHyperparams.default(2).to_vector(), jac=True,
                            method="L-BFGS-B", bounds=bounds)
    assert gp.log_marginal_likelihood(fitted) >= -ref.fun - 0.1


def test_fit_recovers_lengthscale_ordering():
    rng = np.random.default_rng(8)
    X = rng.uniform(-2, 2, size=(60, 2))
    truth = gp.KernelHyperparams(np.log([0.5, 2.0]), 0.0, math.log(1e-4))
    K = gp.kernel_matrix(X, X, truth) + 1e-4 * np.eye(len(X))
    y = np.linalg.cholesky(K) @ rng.standard_normal(len(X))
    fitted = gp.fit_hyperparameters(gp.build_state(X, y), iterations=100, step=0.1)
    short, long = fitted.theta.lengthscales
    assert short < long


def test_constant_observations_shrink_signal(rng):
    X = rng.uniform(-2, 2, size=(10, 2))
    start = gp.build_state(X, np.full(10, 0.42))
    fitted = gp.fit_hyperparameters(start, iterations=50)
    assert fitted.theta.signal_var < start.theta.signal_var


def test_mirrored_dimensions_share_gradient(rng):
    col = rng.uniform(-2, 2, size=12)
    X = np.column_stack([col, col, rng.uniform(-2, 2, size=12)])
    state = gp.build_state(X, np.sin(col) + X[:, 2])
    grad = gp.lml_gradient(state)
    assert grad[0] == pytest.approx(grad[1], rel=1e-12, abs=1e-12)


def test_fit_needs_two_points():
    state = gp.build_state(np.zeros((1, 5)), [0.5])
    with pytest.raises(ContractError):
        gp.fit_hyperparameters(state, iterations=5)
    assert gp.fit_hyperparameters(state, iterations=0) is state


def test_fit_is_affine_invariant(rng):
    X, y = _toy_data(rng, n=15)
    a = gp.fit_hyperparameters(gp.build_state(X, y), iterations=30)
    b = gp.fit_hyperparameters(gp.build_state(X, 4.0 * y - 2.0), iterations=30)
    np.testing.assert_allclose(a.theta.to_vector(), b.theta.to_vector(), atol=1e-8)

    xs = rng.uniform(-2, 2, size=(4, 2))
    mean_a, var_a = gp.posterior_batch(a, xs)
    mean_b, var_b = gp.posterior_batch(b, xs)
    np.testing.assert_allclose(mean_b, 4.0 * mean_a - 2.0, atol=1e-8)
    np.testing.assert_allclose(var_b, 16.0 * var_a, atol=1e-8)


def test_fitted_params_stay_in_clip_range(rng):
    X, y = _toy_data(rng, n=10)
    fitted = gp.fit_hyperparameters(gp.build_state(X, y), iterations=100, step=1.0)
    vec = fitted.theta.to_vector()
    assert np.all(vec[:-2] >= gp.LOG_LENGTHSCALE_BOUNDS[0] - 1e-12)
    assert np.all(vec[:-2] <= gp.LOG_LENGTHSCALE_BOUNDS[1] + 1e-12)
    assert gp.LOG_NOISE_VAR_BOUNDS[0] - 1e-12 <= vec[-1] <= gp.LOG_NOISE_VAR_BOUNDS[1] + 1e-12


def test_add_observation_grows_state(rng, theta2):
    X, y = _toy_data(rng, n=5)
    state = gp.build_state(X, y, theta2)
    grown = gp.add_observation(state, [0.1, 0.2], 0.9)
    assert grown.n == 6
    assert grown.theta is theta2
    np.testing.assert_array_equal(grown.X[-1], [0.1, 0.2])
    with pytest.raises(ContractError):
        gp.add_observation(state, [0.1, 0.2], math.nan)
