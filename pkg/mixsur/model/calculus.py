"""
Analytic first and second derivatives of the mixture SUR log-likelihood.

Derivatives are taken with respect to the packed parameter vector
(pi_1..pi_{K-1}, beta, theta_1, ..., theta_K) with theta_k = (lambda_k, v(Sigma_k)) and
pi_K = 1 - (pi_1 + ... + pi_{K-1}). For observation i and component k the building blocks are

    a_k   = e_k / pi_k (k < K),  a_K = -1/pi_K
    b_ki  = Sigma_k^{-1} r_ki,   B_ki = Sigma_k^{-1} - b_ki b_ki'
    c_ki  = (b_ki', -1/2 (G' vec B_ki)')'

and the responsibilities alpha_ki weight them into the per-observation score and Hessian.
Kronecker products with the duplication matrix G are evaluated by indexing, never formed.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.special import logsumexp

from mixsur.model.core import vech_indices
from mixsur.model.likelihood import component_workspaces, log_weighted_densities
from mixsur.objects import (
    Dataset,
    DegenerateWeight,
    HessianAsymmetry,
    NotPositiveDefinite,
    ParameterLayout,
    Theta,
)

ASYMMETRY_TOLERANCE = 1e-10


def duplication_matrix(D: int) -> np.ndarray:
    """
    The D^2 x D(D+1)/2 zero/one matrix G with G v(A) = vec(A) for symmetric A,
    vec stacking columns.
    """
    if D < 1:
        raise ValueError("D must be at least 1")
    rows, cols = vech_indices(D)
    G = np.zeros((D * D, len(rows)))
    for u, (i, j) in enumerate(zip(rows, cols)):
        G[j * D + i, u] = 1.0
        G[i * D + j, u] = 1.0
    return G


def duplication_transpose_vec(A: np.ndarray) -> np.ndarray:
    """G' vec(A) for a matrix (or stack of matrices) A, without forming G."""
    rows, cols = vech_indices(A.shape[-1])
    off_diagonal = (rows != cols).astype(float)
    return A[..., rows, cols] + off_diagonal * A[..., cols, rows]


def kron_vector_duplication(b: np.ndarray, precision: np.ndarray) -> np.ndarray:
    """
    (b' kron Sigma^{-1}) G for each row of `b`, shape (I, D, D(D+1)/2).
    Column u = (p, q) equals Sigma^{-1}[:, p] b_q + Sigma^{-1}[:, q] b_p, halved when p = q.
    """
    rows, cols = vech_indices(precision.shape[0])
    off_diagonal = (rows != cols).astype(float)
    return (
        precision[None, :, rows] * b[:, None, cols]
        + off_diagonal * precision[None, :, cols] * b[:, None, rows]
    )


def duplication_sandwich(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """
    G' (A kron B) G, evaluated entrywise. A and B may be stacks broadcasting against
    each other; the result has shape (..., m, m) with m = D(D+1)/2.
    """
    D = A.shape[-1]
    rows, cols = vech_indices(D)
    weights = (np.ones(len(rows)), (rows != cols).astype(float))
    # a column u of G has ones at vec(rows[u], cols[u]) and at vec(cols[u], rows[u])
    positions = ((rows, cols), (cols, rows))
    out = 0.0
    for (I_s, J_s), w_s in zip(positions, weights):
        for (I_t, J_t), w_t in zip(positions, weights):
            out = out + (
                np.outer(w_s, w_t)
                * A[..., J_s[:, None], J_t[None, :]]
                * B[..., I_s[:, None], I_t[None, :]]
            )
    return out


@dataclass(frozen=True)
class ScoreBlocks:
    d_pi: np.ndarray
    d_beta: np.ndarray
    d_theta: tuple[np.ndarray, ...]

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.d_pi, self.d_beta, *self.d_theta])


@dataclass(frozen=True)
class HessianBlocks:
    """Full symmetric Hessian with the layout of the packed parameter vector."""

    matrix: np.ndarray
    layout: ParameterLayout

    def block(self, row: slice, col: slice) -> np.ndarray:
        return self.matrix[row, col]


@dataclass(frozen=True)
class _Ingredients:
    alpha: np.ndarray  # (I, K)
    A: np.ndarray  # (K, K-1), row k is a_k'
    abar: np.ndarray  # (I, K-1)
    b: np.ndarray  # (I, K, D)
    bbar: np.ndarray  # (I, D)
    c: np.ndarray  # (I, K, q)
    precisions: np.ndarray  # (K, D, D)


def _check_weights(theta: Theta) -> None:
    w = theta.weights
    if theta.n_components > 1 and (np.any(w <= 0) or np.any(w >= 1)):
        raise DegenerateWeight(w)


def _ingredients(theta: Theta, dataset: Dataset) -> _Ingredients:
    _check_weights(theta)
    K = theta.n_components
    workspaces = component_workspaces(theta, dataset)
    log_f = log_weighted_densities(theta, dataset, workspaces)
    alpha = np.exp(log_f - logsumexp(log_f, axis=1)[:, None])

    A = np.zeros((K, K - 1))
    if K > 1:
        A[: K - 1] = np.diag(1.0 / theta.weights[: K - 1])
        A[K - 1] = -1.0 / theta.weights[K - 1]
    abar = alpha @ A

    b = np.stack([ws.scaled_residuals for ws in workspaces], axis=1)
    bbar = np.einsum("ik,ikd->id", alpha, b)

    precisions = np.stack([ws.precision for ws in workspaces])
    outer = np.einsum("ikd,ike->ikde", b, b)
    B = precisions[None] - outer
    c = np.concatenate([b, -0.5 * duplication_transpose_vec(B)], axis=2)
    return _Ingredients(
        alpha=alpha, A=A, abar=abar, b=b, bbar=bbar, c=c, precisions=precisions
    )


def score(theta: Theta, dataset: Dataset) -> ScoreBlocks:
    """
    Analytic score of the log-likelihood.

    Args:
        theta (Theta): parameters; every weight strictly inside (0, 1).
        dataset (Dataset): the sample.

    Returns:
        ScoreBlocks: d_pi (K-1,), d_beta (P,), and one block of length D + D(D+1)/2 per component.
    """
    ing = _ingredients(theta, dataset)
    X = dataset.designs
    d_pi = ing.abar.sum(axis=0)
    d_beta = np.einsum("ipd,id->p", X, ing.bbar)
    d_theta = tuple(
        np.einsum("i,iq->q", ing.alpha[:, k], ing.c[:, k])
        for k in range(theta.n_components)
    )
    return ScoreBlocks(d_pi=d_pi, d_beta=d_beta, d_theta=d_theta)


def _component_curvature(b: np.ndarray, precision: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    F_ki = [Sigma^{-1}, (b' kron Sigma^{-1}) G] of shape (I, D, q) and
    C_ki of shape (I, q, q), the negated Hessian of ln f_ki in theta_k.
    """
    I, D = b.shape
    E = kron_vector_duplication(b, precision)
    F = np.concatenate([np.broadcast_to(precision, (I, D, D)), E], axis=2)
    outer = np.einsum("id,ie->ide", b, b)
    V = 0.5 * duplication_sandwich(2.0 * outer - precision[None], precision[None])
    top = F
    bottom = np.concatenate([np.transpose(E, (0, 2, 1)), V], axis=2)
    C = np.concatenate([top, bottom], axis=1)
    return F, C


def hessian(theta: Theta, dataset: Dataset) -> HessianBlocks:
    """
    Analytic Hessian of the log-likelihood, assembled block by block:
    pi-pi, pi-beta, pi-theta_k, beta-beta, beta-theta_k, theta_k-theta_k and theta_k-theta_h.

    Raises:
        HessianAsymmetry: if the assembled matrix is not symmetric to 1e-10 relative.
    """
    spec = dataset.spec
    layout = ParameterLayout(spec)
    ing = _ingredients(theta, dataset)
    K, D = theta.n_components, theta.n_equations
    X = dataset.designs
    alpha, A, abar, b, bbar, c = ing.alpha, ing.A, ing.abar, ing.b, ing.bbar, ing.c

    H = np.zeros((layout.size, layout.size))

    def put(rows: slice, cols: slice, block: np.ndarray) -> None:
        H[rows, cols] = block
        if rows != cols:
            H[cols, rows] = block.T

    put(layout.pi, layout.pi, -abar.T @ abar)

    M = np.einsum("ik,kj,ikd->ijd", alpha, A, b) - np.einsum("ij,id->ijd", abar, bbar)
    put(layout.pi, layout.beta, np.einsum("ijd,ipd->jp", M, X))

    B_bar = np.einsum("ik,kde->ide", alpha, ing.precisions) - np.einsum(
        "ik,ikd,ike->ide", alpha, b, b
    )
    inner = B_bar + np.einsum("id,ie->ide", bbar, bbar)
    put(layout.beta, layout.beta, -np.einsum("ipd,ide,iqe->pq", X, inner, X))

    for k in range(K):
        a_k = alpha[:, k]
        block_k = layout.theta(k)
        F, C = _component_curvature(b[:, k], ing.precisions[k])

        put(
            layout.pi,
            block_k,
            np.einsum("i,ij,iq->jq", a_k, A[k][None, :] - abar, c[:, k]),
        )

        shifted = F - np.einsum("id,iq->idq", b[:, k] - bbar, c[:, k])
        put(layout.beta, block_k, -np.einsum("i,ipd,idq->pq", a_k, X, shifted))

        diagonal = -np.einsum("i,iab->ab", a_k, C) + np.einsum(
            "i,ia,ib->ab", a_k * (1.0 - a_k), c[:, k], c[:, k]
        )
        put(block_k, block_k, diagonal)

        for h in range(k + 1, K):
            put(
                block_k,
                layout.theta(h),
                -np.einsum("i,ia,ib->ab", a_k * alpha[:, h], c[:, k], c[:, h]),
            )

    scale = max(np.max(np.abs(H)), 1.0)
    asymmetry = np.max(np.abs(H - H.T)) / scale
    if asymmetry > ASYMMETRY_TOLERANCE:
        raise HessianAsymmetry(asymmetry)
    return HessianBlocks(matrix=0.5 * (H + H.T), layout=layout)


def observed_information(hessian: HessianBlocks | np.ndarray) -> np.ndarray:
    matrix = hessian.matrix if isinstance(hessian, HessianBlocks) else np.asarray(hessian)
    return -matrix


def covariance_of_estimates(hessian: HessianBlocks | np.ndarray) -> np.ndarray:
    """
    (-H)^{-1}, the estimated covariance of the packed ML estimator.

    The square roots of its diagonal are the standard errors. At an interior maximum
    H is negative definite, so the inverse of -H (not of H) carries the variances.
    """
    information = observed_information(hessian)
    try:
        chol = cholesky(information, lower=True)
    except LinAlgError:
        raise NotPositiveDefinite(
            "The observed information is not positive definite; the estimate is not an interior maximum"
        )
    covariance = cho_solve((chol, True), np.eye(information.shape[0]))
    return 0.5 * (covariance + covariance.T)
