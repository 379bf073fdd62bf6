from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from mixsur.objects import (
    Dataset,
    InvalidParameterError,
    ModelSpec,
    ParameterLayout,
    Theta,
)


@lru_cache(maxsize=None)
def vech_indices(D: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Row and column indices of the lower triangle of a D x D matrix, columns stacked
    one after the other. For D=2 this gives (0,0), (1,0), (1,1).
    """
    rows, cols = [], []
    for j in range(D):
        for i in range(j, D):
            rows.append(i)
            cols.append(j)
    rows, cols = np.array(rows), np.array(cols)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def vech(matrix: np.ndarray) -> np.ndarray:
    """v(A): the lower triangle of `matrix` (or of each matrix in a stack) as a vector."""
    rows, cols = vech_indices(matrix.shape[-1])
    return matrix[..., rows, cols]


def unvech(vector: np.ndarray, D: int) -> np.ndarray:
    """Inverse of `vech` for symmetric matrices."""
    rows, cols = vech_indices(D)
    out = np.zeros(vector.shape[:-1] + (D, D))
    out[..., rows, cols] = vector
    out[..., cols, rows] = vector
    return out


def build_design_matrix(dataset: Dataset, i: int) -> np.ndarray:
    """
    The P x D block matrix X_i of observation i: column d holds the regressors of
    equation d in the rows belonging to that equation, zeros elsewhere.
    """
    if not 0 <= i < dataset.n_obs:
        raise IndexError(f"Observation index {i} out of range for I={dataset.n_obs}")
    return dataset.designs[i].copy()


def build_augmented_design(X_i: np.ndarray, k: int, n_components: int) -> np.ndarray:
    """
    X_ki, shape (D*K + P, D): the selector block O_k stacked above X_i, so that
    X_ki' gamma = lambda_k + X_i' beta for gamma = (lambda_1, ..., lambda_K, beta).

    `k` is 0-based.
    """
    if not 0 <= k < n_components:
        raise IndexError(f"Component index {k} out of range for K={n_components}")
    P, D = X_i.shape
    selector = np.zeros((D * n_components, D))
    selector[k * D : (k + 1) * D] = np.eye(D)
    return np.vstack([selector, X_i])


def linear_predictor(dataset: Dataset, beta: np.ndarray) -> np.ndarray:
    """X_i' beta for every observation, shape (I, D)."""
    return np.einsum("ipd,p->id", dataset.designs, beta)


def count_parameters(spec: ModelSpec) -> int:
    """(K-1) + P + K*D + K*D*(D+1)/2."""
    K, D, P = spec.n_components, spec.n_equations, spec.n_regressors
    return (K - 1) + P + K * D + K * D * (D + 1) // 2


def bic(loglik: float, npar: int, n_obs: int) -> float:
    """2 * loglik - npar * ln(I). Larger is better."""
    if n_obs < 1:
        raise ValueError("n_obs must be at least 1")
    return float(2.0 * loglik - npar * np.log(n_obs))


@dataclass
class IdentifiabilityReport:
    violations: dict[int, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0

    def __str__(self) -> str:
        if self.ok:
            return "identifiable"
        return "; ".join(
            f"equation {d + 1}: {msg}" for d, msg in sorted(self.violations.items())
        )


def check_identifiability(dataset: Dataset) -> IdentifiabilityReport:
    """
    For every equation with regressors, check that the rows [1, x_id'] have full column
    rank, i.e. the x_id do not all lie on a common hyperplane of dimension P_d - 1.
    """
    report = IdentifiabilityReport()
    I = dataset.n_obs
    for d, indices in enumerate(dataset.spec.regressors):
        P_d = len(indices)
        if P_d == 0:
            continue
        Z = np.column_stack([np.ones(I), dataset.pool[:, list(indices)]])
        if I < P_d + 1:
            report.violations[d] = (
                f"{I} observations cannot determine {P_d} coefficients and an intercept"
            )
            continue
        singular_values = np.linalg.svd(Z, compute_uv=False)
        tol = max(Z.shape) * np.finfo(float).eps * singular_values[0]
        rank = int(np.sum(singular_values > tol))
        if rank < P_d + 1:
            report.violations[d] = (
                f"regressors are collinear with the intercept (rank {rank} < {P_d + 1})"
            )
    return report


def pack(theta: Theta) -> np.ndarray:
    """Flatten `theta` into (pi_1..pi_{K-1}, beta, lambda_1, v(Sigma_1), ..., lambda_K, v(Sigma_K))."""
    parts = [theta.weights[:-1], theta.beta]
    for k in range(theta.n_components):
        parts.append(theta.intercepts[k])
        parts.append(vech(theta.covariances[k]))
    return np.concatenate(parts)


def unpack(packed: np.ndarray, spec: ModelSpec) -> Theta:
    layout = ParameterLayout(spec)
    packed = np.asarray(packed, dtype=float)
    if packed.shape != (layout.size,):
        raise InvalidParameterError(
            f"Packed vector has shape {packed.shape}, expected ({layout.size},)"
        )
    if not np.all(np.isfinite(packed)):
        raise InvalidParameterError("Packed vector contains non-finite values")

    free = packed[layout.pi]
    last = 1.0 - free.sum()
    if last <= 0:
        raise InvalidParameterError(
            f"Weights of the first K-1 components sum to {free.sum()!r}, leaving no weight for the last"
        )
    weights = np.append(free, last)

    intercepts = np.stack([packed[layout.intercept(k)] for k in range(layout.K)])
    covariances = np.stack(
        [unvech(packed[layout.vech(k)], layout.D) for k in range(layout.K)]
    )
    return Theta(
        weights=weights,
        beta=packed[layout.beta].copy(),
        intercepts=intercepts,
        covariances=covariances,
    )


def canonical_order(theta: Theta) -> list[int]:
    """Component order by decreasing weight, ties broken by the intercepts."""
    return sorted(
        range(theta.n_components),
        key=lambda k: (-theta.weights[k], tuple(theta.intercepts[k])),
    )
