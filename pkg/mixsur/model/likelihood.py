from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.special import logsumexp

from mixsur.model.core import linear_predictor
from mixsur.objects import Dataset, InvalidParameterError, Posteriors, SingularCovariance, Theta

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class ComponentWorkspace:
    """
    Per-component quantities shared by the density, the score and the Hessian.

    Attributes:
        chol: lower Cholesky factor of Sigma_k.
        log_det: log det Sigma_k.
        precision: Sigma_k^{-1}.
        residuals: r_ki = y_i - lambda_k - X_i' beta, shape (I, D).
        whitened: L_k^{-1} r_ki, shape (I, D).
    """

    chol: np.ndarray
    log_det: float
    precision: np.ndarray
    residuals: np.ndarray
    whitened: np.ndarray

    @property
    def scaled_residuals(self) -> np.ndarray:
        """b_ki = Sigma_k^{-1} r_ki, shape (I, D)."""
        return self.residuals @ self.precision


def factor_covariance(sigma: np.ndarray, k: int) -> np.ndarray:
    try:
        chol = cholesky(sigma, lower=True)
    except LinAlgError:
        raise SingularCovariance(k)
    if not np.all(np.isfinite(chol)) or np.any(np.diag(chol) <= 0):
        raise SingularCovariance(k)
    return chol


def component_workspaces(theta: Theta, dataset: Dataset) -> list[ComponentWorkspace]:
    if theta.n_equations != dataset.spec.n_equations or theta.n_regressors != dataset.spec.n_regressors:
        raise InvalidParameterError(
            "Parameters do not match the dimensions of the dataset's model"
        )
    D = theta.n_equations
    mean = linear_predictor(dataset, theta.beta)
    workspaces = []
    for k in range(theta.n_components):
        chol = factor_covariance(theta.covariances[k], k)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        if not np.isfinite(log_det):
            raise SingularCovariance(k)
        residuals = dataset.Y - theta.intercepts[k] - mean
        whitened = solve_triangular(chol, residuals.T, lower=True).T
        precision = cho_solve((chol, True), np.eye(D))
        precision = 0.5 * (precision + precision.T)
        workspaces.append(
            ComponentWorkspace(
                chol=chol,
                log_det=log_det,
                precision=precision,
                residuals=residuals,
                whitened=whitened,
            )
        )
    return workspaces


def log_weighted_densities(
    theta: Theta,
    dataset: Dataset,
    workspaces: list[ComponentWorkspace] | None = None,
) -> np.ndarray:
    """Matrix of ln f_ki = ln pi_k + ln phi_D(y_i; lambda_k + X_i' beta, Sigma_k), shape (I, K)."""
    if workspaces is None:
        workspaces = component_workspaces(theta, dataset)
    D = theta.n_equations
    columns = [
        np.log(theta.weights[k])
        - 0.5 * D * LOG_2PI
        - 0.5 * ws.log_det
        - 0.5 * np.sum(ws.whitened**2, axis=1)
        for k, ws in enumerate(workspaces)
    ]
    return np.column_stack(columns)


def log_component_weight_density(theta: Theta, dataset: Dataset, i: int, k: int) -> float:
    """ln f_ki for a single observation and component (both 0-based)."""
    if not 0 <= i < dataset.n_obs:
        raise IndexError(f"Observation index {i} out of range for I={dataset.n_obs}")
    if not 0 <= k < theta.n_components:
        raise IndexError(f"Component index {k} out of range for K={theta.n_components}")
    D = theta.n_equations
    chol = factor_covariance(theta.covariances[k], k)
    residual = dataset.Y[i] - theta.intercepts[k] - dataset.designs[i].T @ theta.beta
    z = solve_triangular(chol, residual, lower=True)
    return float(
        np.log(theta.weights[k])
        - 0.5 * D * LOG_2PI
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * z @ z
    )


def log_likelihood(theta: Theta, dataset: Dataset) -> float:
    """Observed-data log-likelihood, each mixture sum evaluated with log-sum-exp."""
    return float(np.sum(logsumexp(log_weighted_densities(theta, dataset), axis=1)))


def posteriors_and_loglik(theta: Theta, dataset: Dataset) -> tuple[Posteriors, float]:
    """Responsibilities and log-likelihood from a single density evaluation."""
    log_f = log_weighted_densities(theta, dataset)
    log_mix = logsumexp(log_f, axis=1)
    alpha = np.exp(log_f - log_mix[:, None])
    alpha /= alpha.sum(axis=1, keepdims=True)
    return Posteriors(alpha), float(np.sum(log_mix))


def responsibilities(theta: Theta, dataset: Dataset) -> Posteriors:
    return posteriors_and_loglik(theta, dataset)[0]


def complete_data_loglik(theta: Theta, dataset: Dataset, labels: np.ndarray) -> float:
    """
    Sum over i and k of z_ik ln f_ki for one-hot labels `z` of shape (I, K).
    """
    labels = np.asarray(labels, dtype=float)
    if labels.shape != (dataset.n_obs, theta.n_components):
        raise InvalidParameterError(
            f"Labels must have shape {(dataset.n_obs, theta.n_components)}, got {labels.shape}"
        )
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise InvalidParameterError("Labels must be one-hot rows")
    log_f = log_weighted_densities(theta, dataset)
    return float(np.sum(log_f[labels == 1]))


def expected_complete_data_loglik(
    theta: Theta, dataset: Dataset, posteriors: Posteriors
) -> float:
    """Sum over i and k of p_ik ln f_ki, the quantity the M-step maximizes."""
    log_f = log_weighted_densities(theta, dataset)
    return float(np.sum(posteriors.probabilities * log_f))
