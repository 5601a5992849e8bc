"""
gp.py
-----
Exact Gaussian-process regression with an ARD squared-exponential kernel.

Observations are standardized internally (zero mean, unit variance once
there are at least two of them). Hyperparameters live in log space:
one log lengthscale per input dimension, log signal variance and log
noise variance. The kernel matrix is factorized once per state with a
jitter ladder, and every query reuses that factor.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from errors import ContractError, NumericalError

JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
LOG_2PI = math.log(2.0 * math.pi)

# Clip ranges for Adam iterates (log space, standardized units)
LOG_LENGTHSCALE_BOUNDS = (math.log(1e-2), math.log(1e3))
LOG_SIGNAL_VAR_BOUNDS = (math.log(1e-4), math.log(1e4))
LOG_NOISE_VAR_BOUNDS = (math.log(1e-6), math.log(10.0))

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class KernelHyperparams:
    log_lengthscales: np.ndarray
    log_signal_var: float
    log_noise_var: float

    @classmethod
    def default(cls, dim: int, lengthscale: float = 1.0, signal_std: float = 1.0,
                noise_std: float = 0.1) -> "KernelHyperparams":
        return cls(
            log_lengthscales=np.full(dim, math.log(lengthscale)),
            log_signal_var=2.0 * math.log(signal_std),
            log_noise_var=2.0 * math.log(noise_std),
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "KernelHyperparams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:-2].copy(), float(vec[-2]), float(vec[-1]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_lengthscales, [self.log_signal_var, self.log_noise_var]])

    @property
    def dim(self) -> int:
        return len(self.log_lengthscales)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_var(self) -> float:
        return math.exp(self.log_signal_var)

    @property
    def noise_var(self) -> float:
        return math.exp(self.log_noise_var)

    def clipped(self) -> "KernelHyperparams":
        return KernelHyperparams(
            np.clip(self.log_lengthscales, *LOG_LENGTHSCALE_BOUNDS),
            float(np.clip(self.log_signal_var, *LOG_SIGNAL_VAR_BOUNDS)),
            float(np.clip(self.log_noise_var, *LOG_NOISE_VAR_BOUNDS)),
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "log_lengthscales": self.log_lengthscales.tolist(),
            "log_signal_var": self.log_signal_var,
            "log_noise_var": self.log_noise_var,
        }


@dataclass(frozen=True)
class Posterior:
    mean: float
    variance: float


@dataclass(frozen=True)
class GpState:
    """Immutable training set plus its cached factorization."""

    X: np.ndarray
    y_raw: np.ndarray
    y: np.ndarray
    y_mean: float
    y_std: float
    theta: KernelHyperparams
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def to_dict(self) -> Dict[str, object]:
        """Snapshot for trace reproducibility."""
        return {
            "X": self.X.tolist(),
            "y": self.y_raw.tolist(),
            "theta": self.theta.to_dict(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "jitter": self.jitter,
        }


def kernel_matrix(A: np.ndarray, B: np.ndarray, theta: KernelHyperparams) -> np.ndarray:
    """K_ij = sf2 * exp(-0.5 * sum_t (A_it - B_jt)^2 / l_t^2)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1] or A.shape[1] != theta.dim:
        raise ContractError(f"dimension mismatch: {A.shape}, {B.shape}, theta dim {theta.dim}")
    ls = theta.lengthscales
    sq = cdist(A / ls, B / ls, metric="sqeuclidean")
    return theta.signal_var * np.exp(-0.5 * sq)


def standardize(y_raw: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Zero-mean/unit-variance for n >= 2; identity transform for a single point."""
    if len(y_raw) < 2:
        return y_raw.copy(), 0.0, 1.0
    y_mean = float(np.mean(y_raw))
    y_std = float(np.std(y_raw))
    if not y_std > 1e-12:
        y_std = 1.0
    return (y_raw - y_mean) / y_std, y_mean, y_std


def _factorize(K: np.ndarray, noise_var: float) -> Tuple[np.ndarray, float]:
    n = K.shape[0]
    for jitter in JITTER_LADDER:
        try:
            L = linalg.cholesky(K + (noise_var + jitter) * np.eye(n), lower=True)
        except linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            if jitter > JITTER_LADDER[0]:
                logging.debug(f"Cholesky needed jitter {jitter:g}")
            return L, jitter
    raise NumericalError(
        f"kernel matrix not positive definite after jitter {JITTER_LADDER[-1]:g} (n={n})"
    )


def build_state(X: np.ndarray, y_raw: np.ndarray,
                theta: Optional[KernelHyperparams] = None) -> GpState:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y_raw = np.asarray(y_raw, dtype=np.float64).ravel()
    if X.shape[0] != len(y_raw) or len(y_raw) < 1:
        raise ContractError(f"need n >= 1 matching rows, got X {X.shape} and y {y_raw.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y_raw))):
        raise ContractError("observations must be finite")
    if theta is None:
        theta = KernelHyperparams.default(X.shape[1])

    y, y_mean, y_std = standardize(y_raw)
    K = kernel_matrix(X, X, theta)
    L, jitter = _factorize(K, theta.noise_var)
    alpha = linalg.cho_solve((L, True), y)
    return GpState(X=X, y_raw=y_raw, y=y, y_mean=y_mean, y_std=y_std, theta=theta,
                   chol=L, alpha=alpha, jitter=jitter)


def with_theta(state: GpState, theta: KernelHyperparams) -> GpState:
    return build_state(state.X, state.y_raw, theta)


def log_marginal_likelihood(state: GpState) -> float:
    """-0.5 y^T alpha - sum log L_ii - n/2 log 2pi, in standardized units."""
    L = state.chol
    value = (-0.5 * float(state.y @ state.alpha)
             - float(np.sum(np.log(np.diag(L))))
             - 0.5 * state.n * LOG_2PI)
    if not math.isfinite(value):
        raise NumericalError("log marginal likelihood is not finite")
    return value


def lml_gradient(state: GpState) -> np.ndarray:
    """
    d LML / d (log l_1..log l_d, log sf2, log sn2).

    Uses 0.5 * tr((alpha alpha^T - K^-1) dK/dtheta).
    """
    theta = state.theta
    X = state.X
    n = state.n
    Kinv = linalg.cho_solve((state.chol, True), np.eye(n))
    W = np.outer(state.alpha, state.alpha) - Kinv
    Kf = kernel_matrix(X, X, theta)

    grad = np.empty(theta.dim + 2)
    WK = W * Kf
    for t in range(theta.dim):
        diff = X[:, t][:, None] - X[:, t][None, :]
        grad[t] = 0.5 * np.sum(WK * diff ** 2) / theta.lengthscales[t] ** 2
    grad[-2] = 0.5 * np.sum(WK)
    grad[-1] = 0.5 * theta.noise_var * np.trace(W)
    return grad


def fit_hyperparameters(state: GpState, iterations: int = 50, step: float = 0.1) -> GpState:
    """
    Adam ascent on the log marginal likelihood in log-parameter space.

    Returns the best iterate seen, so the result never scores below the
    starting state. A numerical failure stops the run at the last valid
    iterate.
    """
    if iterations <= 0:
        return state
    if state.n < 2:
        raise ContractError("hyperparameter fitting needs at least two observations")

    vec = state.theta.to_vector()
    m = np.zeros_like(vec)
    v = np.zeros_like(vec)

    current = state
    best_state, best_lml = state, log_marginal_likelihood(state)
    start_lml = best_lml

    for t in range(1, iterations + 1):
        try:
            g = lml_gradient(current)
        except (NumericalError, linalg.LinAlgError) as e:
            logging.warning(f"GP fit stopped at step {t}: {e}")
            break

        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        vec = vec + step * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

        theta = KernelHyperparams.from_vector(vec).clipped()
        vec = theta.to_vector()
        try:
            current = with_theta(current, theta)
            lml = log_marginal_likelihood(current)
        except NumericalError as e:
            logging.warning(f"GP fit reverted at step {t}: {e}")
            break

        if lml > best_lml:
            best_state, best_lml = current, lml

    logging.debug(
        f"GP fit: LML {start_lml:.4f} -> {best_lml:.4f} "
        f"lengthscales={np.round(best_state.theta.lengthscales, 3).tolist()}"
    )
    return best_state


def posterior_batch(state: GpState, Xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """De-standardized latent mean and variance at each row of Xs."""
    Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64))
    Ks = kernel_matrix(state.X, Xs, state.theta)
    mean_std = Ks.T @ state.alpha
    v = linalg.solve_triangular(state.chol, Ks, lower=True)
    var_std = state.theta.signal_var - np.sum(v * v, axis=0)

    floor = -1e-8 * state.theta.signal_var
    if np.any(var_std < floor):
        logging.warning(f"posterior variance {var_std.min():.3e} below tolerance; clamped to 0")
    var_std = np.maximum(var_std, 0.0)

    mean = state.y_mean + state.y_std * mean_std
    return mean, var_std * state.y_std ** 2


def posterior(state: GpState, x) -> Posterior:
    mean, var = posterior_batch(state, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return Posterior(float(mean[0]), float(var[0]))


def add_observation(state: GpState, z, value: float) -> GpState:
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if not (np.all(np.isfinite(z)) and math.isfinite(value)):
        raise ContractError("new observation must be finite")
    return build_state(np.vstack([state.X, z]), np.append(state.y_raw, value), state.theta)
