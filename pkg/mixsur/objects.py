from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.linalg import LinAlgError, cholesky


class MixSURError(Exception):
    """Base class for every error raised by mixsur."""

    pass


class InvalidParameterError(MixSURError):
    pass


class SingularCovariance(MixSURError):
    def __init__(self, k: int, message: str | None = None):
        self.k = k
        super().__init__(
            message or f"Covariance matrix of component {k + 1} is not positive definite"
        )


class DegenerateWeight(MixSURError):
    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights)
        super().__init__(
            f"Mixture weights must lie strictly inside (0, 1), got {self.weights.tolist()}"
        )


class SingularSystem(MixSURError):
    pass


class EmptyComponent(MixSURError):
    def __init__(self, k: int, size: float, minimum: int):
        self.k = k
        self.size = size
        super().__init__(
            f"Component {k + 1} has effective size {size:.4g}, at least {minimum} is needed"
        )


class AllStartsFailed(MixSURError):
    def __init__(self, reasons: dict[int, str]):
        self.reasons = reasons
        details = "; ".join(f"start {i}: {r}" for i, r in sorted(reasons.items()))
        super().__init__(f"All {len(reasons)} EM starts failed ({details})")


class NotPositiveDefinite(MixSURError):
    pass


class HessianAsymmetry(MixSURError):
    def __init__(self, asymmetry: float):
        self.asymmetry = asymmetry
        super().__init__(
            f"Assembled Hessian has relative asymmetry {asymmetry:.3e}, check the block formulas"
        )


class EnumerationTooLarge(MixSURError):
    def __init__(self, n_cells: int, limit: int):
        self.n_cells = n_cells
        self.limit = limit
        super().__init__(
            f"Search grid has {n_cells} cells, which exceeds the limit of {limit}"
        )


class DegenerateTable(MixSURError):
    pass


class TooFewReplicates(MixSURError):
    def __init__(self, count: int, needed: int = 2):
        self.count = count
        super().__init__(f"Need at least {needed} bootstrap replicates, got {count}")


class IngestError(MixSURError):
    pass


class MissingColumn(IngestError):
    def __init__(self, columns: Sequence[str], available: Sequence[str]):
        self.columns = list(columns)
        super().__init__(
            f"Columns not found in data: {', '.join(self.columns)}. "
            f"Available columns: {', '.join(available)}"
        )


class ParseError(IngestError):
    def __init__(self, cells: list[tuple[int, str]]):
        self.cells = cells
        shown = ", ".join(f"row {r} column '{c}'" for r, c in cells[:20])
        more = f" and {len(cells) - 20} more" if len(cells) > 20 else ""
        super().__init__(f"Non-numeric values at {shown}{more}")


class EmptyData(IngestError):
    pass


class ConfigError(MixSURError):
    pass


class ModelSpec(BaseModel):
    """
    The fixed structure of a model: which pool columns enter each equation and how many
    mixture components there are.

    `regressors[d]` lists the indices of the regressor pool columns used by equation `d`.
    A pool column may appear in several equations.
    """

    model_config = ConfigDict(frozen=True)

    regressors: tuple[tuple[int, ...], ...] = Field(
        description="For each equation, the indices of the pool columns used as regressors."
    )
    n_components: int = Field(default=1, ge=1, description="Number of mixture components K.")
    response_names: tuple[str, ...] | None = Field(
        default=None, description="Optional labels of the D responses."
    )
    regressor_names: tuple[str, ...] | None = Field(
        default=None, description="Optional labels of the pool columns."
    )

    @field_validator("regressors")
    @classmethod
    def _check_regressors(cls, value):
        if len(value) < 1:
            raise ValueError("At least one equation is required")
        for indices in value:
            if any(j < 0 for j in indices):
                raise ValueError("Regressor indices must be non-negative")
        return value

    @model_validator(mode="after")
    def _check_names(self):
        if self.response_names is not None and len(self.response_names) != len(
            self.regressors
        ):
            raise ValueError("response_names must have one entry per equation")
        if self.regressor_names is not None:
            used = [j for indices in self.regressors for j in indices]
            if used and max(used) >= len(self.regressor_names):
                raise ValueError("regressor_names does not cover every regressor index")
        return self

    @property
    def n_equations(self) -> int:
        return len(self.regressors)

    @property
    def equation_sizes(self) -> tuple[int, ...]:
        return tuple(len(indices) for indices in self.regressors)

    @property
    def n_regressors(self) -> int:
        return sum(self.equation_sizes)

    def response_label(self, d: int) -> str:
        if self.response_names is not None:
            return self.response_names[d]
        return f"y{d + 1}"

    def regressor_label(self, j: int) -> str:
        if self.regressor_names is not None:
            return self.regressor_names[j]
        return f"x{j + 1}"

    def with_components(self, n_components: int) -> "ModelSpec":
        return self.model_copy(update={"n_components": n_components})

    def with_regressors(self, regressors: Sequence[Sequence[int]]) -> "ModelSpec":
        return ModelSpec(
            regressors=tuple(tuple(r) for r in regressors),
            n_components=self.n_components,
            response_names=self.response_names,
            regressor_names=self.regressor_names,
        )


def _read_only(array) -> np.ndarray:
    out = np.array(array, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Theta:
    """
    Full parameter bundle of a mixture SUR model.

    Attributes:
        weights (np.ndarray): mixture weights pi, shape (K,), stored in full.
        beta (np.ndarray): shared regression coefficients, shape (P,), equation by equation.
        intercepts (np.ndarray): component intercepts lambda_k, shape (K, D).
        covariances (np.ndarray): component covariance matrices Sigma_k, shape (K, D, D).
    """

    weights: np.ndarray
    beta: np.ndarray
    intercepts: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        weights = _read_only(np.atleast_1d(self.weights))
        beta = _read_only(np.atleast_1d(self.beta))
        intercepts = _read_only(self.intercepts)
        covariances = _read_only(self.covariances)

        if weights.ndim != 1:
            raise InvalidParameterError("weights must be a vector")
        K = weights.shape[0]
        if intercepts.ndim != 2 or intercepts.shape[0] != K:
            raise InvalidParameterError(
                f"intercepts must have shape (K, D) with K={K}, got {intercepts.shape}"
            )
        D = intercepts.shape[1]
        if covariances.shape != (K, D, D):
            raise InvalidParameterError(
                f"covariances must have shape {(K, D, D)}, got {covariances.shape}"
            )
        if beta.ndim != 1:
            raise InvalidParameterError("beta must be a vector")

        for name, array in [
            ("weights", weights),
            ("beta", beta),
            ("intercepts", intercepts),
            ("covariances", covariances),
        ]:
            if not np.all(np.isfinite(array)):
                raise InvalidParameterError(f"{name} contains non-finite values")

        if np.any(weights <= 0):
            raise InvalidParameterError(
                f"All mixture weights must be positive, got {weights.tolist()}"
            )
        if abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidParameterError(
                f"Mixture weights must sum to one, got {weights.sum()!r}"
            )

        for k in range(K):
            sigma = covariances[k]
            if np.max(np.abs(sigma - sigma.T)) > 1e-12:
                raise InvalidParameterError(
                    f"Covariance matrix of component {k + 1} is not symmetric"
                )
            try:
                cholesky(sigma, lower=True)
            except LinAlgError:
                raise SingularCovariance(k)

        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "intercepts", intercepts)
        object.__setattr__(self, "covariances", covariances)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def n_equations(self) -> int:
        return self.intercepts.shape[1]

    @property
    def n_regressors(self) -> int:
        return self.beta.shape[0]

    def check_spec(self, spec: ModelSpec) -> None:
        expected = (spec.n_components, spec.n_equations, spec.n_regressors)
        actual = (self.n_components, self.n_equations, self.n_regressors)
        if expected != actual:
            raise InvalidParameterError(
                f"Parameters have (K, D, P) = {actual} but the model needs {expected}"
            )

    def permuted(self, order: Sequence[int]) -> "Theta":
        """Return the same parameters with the components listed in `order`."""
        order = list(order)
        return Theta(
            weights=self.weights[order],
            beta=self.beta,
            intercepts=self.intercepts[order],
            covariances=self.covariances[order],
        )

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "beta": self.beta.tolist(),
            "intercepts": self.intercepts.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_json(cls, json_data: dict) -> "Theta":
        try:
            return cls(
                weights=np.asarray(json_data["weights"], dtype=float),
                beta=np.asarray(json_data.get("beta", []), dtype=float),
                intercepts=np.asarray(json_data["intercepts"], dtype=float),
                covariances=np.asarray(json_data["covariances"], dtype=float),
            )
        except KeyError as e:
            raise InvalidParameterError(f"Parameter file is missing the field {e}")


@dataclass(frozen=True)
class Dataset:
    """
    Responses and the regressor pool of a sample, bound to a model structure.

    Attributes:
        Y (np.ndarray): responses, shape (I, D).
        pool (np.ndarray): candidate regressor values, shape (I, R).
        spec (ModelSpec): which pool columns enter each equation.
    """

    Y: np.ndarray
    pool: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        Y = _read_only(self.Y)
        if Y.ndim == 1:
            Y = _read_only(Y[:, None])
        pool = _read_only(self.pool)
        if pool.ndim == 1:
            if pool.size == 0:
                pool = _read_only(np.zeros((Y.shape[0], 0)))
            else:
                pool = _read_only(pool.reshape(Y.shape[0], -1))

        if Y.ndim != 2 or Y.shape[0] < 1:
            raise InvalidParameterError("Y must be a non-empty (I, D) matrix")
        if Y.shape[1] != self.spec.n_equations:
            raise InvalidParameterError(
                f"Y has {Y.shape[1]} columns but the model has {self.spec.n_equations} equations"
            )
        if pool.shape[0] != Y.shape[0]:
            raise InvalidParameterError(
                f"pool has {pool.shape[0]} rows but Y has {Y.shape[0]}"
            )
        if not np.all(np.isfinite(Y)) or not np.all(np.isfinite(pool)):
            raise InvalidParameterError("Data contain non-finite values")
        used = [j for indices in self.spec.regressors for j in indices]
        if used and max(used) >= pool.shape[1]:
            raise InvalidParameterError(
                f"Regressor index {max(used)} is out of range for a pool of {pool.shape[1]} columns"
            )

        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "pool", pool)

    @property
    def n_obs(self) -> int:
        return self.Y.shape[0]

    @cached_property
    def designs(self) -> np.ndarray:
        """Every X_i stacked, shape (I, P, D)."""
        X = np.zeros((self.n_obs, self.spec.n_regressors, self.spec.n_equations))
        offset = 0
        for d, indices in enumerate(self.spec.regressors):
            for j in indices:
                X[:, offset, d] = self.pool[:, j]
                offset += 1
        X.setflags(write=False)
        return X

    def with_spec(self, spec: ModelSpec) -> "Dataset":
        return Dataset(Y=self.Y, pool=self.pool, spec=spec)


class ParameterLayout:
    """
    Positions of each parameter block inside the packed parameter vector
    (pi_1..pi_{K-1}, beta, theta_1, ..., theta_K), theta_k = (lambda_k, v(Sigma_k)).
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.K = spec.n_components
        self.D = spec.n_equations
        self.P = spec.n_regressors
        self.n_vech = self.D * (self.D + 1) // 2
        self.component_size = self.D + self.n_vech

        self.pi = slice(0, self.K - 1)
        self.beta = slice(self.K - 1, self.K - 1 + self.P)
        self._theta_start = self.K - 1 + self.P
        self.size = self._theta_start + self.K * self.component_size

    def theta(self, k: int) -> slice:
        if not 0 <= k < self.K:
            raise IndexError(f"Component index {k} out of range for K={self.K}")
        start = self._theta_start + k * self.component_size
        return slice(start, start + self.component_size)

    def intercept(self, k: int) -> slice:
        start = self.theta(k).start
        return slice(start, start + self.D)

    def vech(self, k: int) -> slice:
        start = self.theta(k).start + self.D
        return slice(start, start + self.n_vech)

    def beta_names(self) -> list[str]:
        names = []
        for d, indices in enumerate(self.spec.regressors):
            for j in indices:
                names.append(
                    f"{self.spec.response_label(d)}~{self.spec.regressor_label(j)}"
                )
        return names

    def names(self) -> list[str]:
        names = [f"pi[{k + 1}]" for k in range(self.K - 1)]
        names += [f"beta[{n}]" for n in self.beta_names()]
        for k in range(self.K):
            names += [
                f"lambda{k + 1}[{self.spec.response_label(d)}]" for d in range(self.D)
            ]
            for j in range(self.D):
                for i in range(j, self.D):
                    names.append(
                        f"sigma{k + 1}[{self.spec.response_label(i)},{self.spec.response_label(j)}]"
                    )
        return names


@dataclass(frozen=True)
class Posteriors:
    """Responsibilities alpha_ki, shape (I, K); each row sums to one."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = _read_only(self.probabilities)
        if p.ndim != 2:
            raise InvalidParameterError("Posterior probabilities must be an (I, K) matrix")
        if np.any(p < 0) or np.any(p > 1) or np.max(np.abs(p.sum(axis=1) - 1)) > 1e-12:
            raise InvalidParameterError(
                "Posterior probabilities must lie in [0, 1] with rows summing to one"
            )
        object.__setattr__(self, "probabilities", p)

    @property
    def component_sizes(self) -> np.ndarray:
        return self.probabilities.sum(axis=0)

    @classmethod
    def from_labels(cls, labels: np.ndarray, n_components: int) -> "Posteriors":
        """Hard posteriors from 0-based component labels."""
        labels = np.asarray(labels, dtype=int)
        p = np.zeros((labels.shape[0], n_components))
        p[np.arange(labels.shape[0]), labels] = 1.0
        return cls(p)


class EmControls(BaseModel):
    """Stopping rules and initialization choices for the EM algorithm."""

    model_config = ConfigDict(frozen=True)

    max_iter: int = Field(default=500, gt=0, description="Cap on EM iterations.")
    tol: float = Field(default=1e-8, gt=0, description="Aitken stopping tolerance.")
    inner_max_iter: int = Field(
        default=500, gt=0, description="Cap on the inner (gamma, Sigma) iterations of the M-step."
    )
    inner_tol: float = Field(
        default=1e-8,
        gt=0,
        description="Mean Euclidean distance between consecutive inner iterates that stops the M-step.",
    )
    n_random_starts: int = Field(
        default=0, ge=0, description="Random-partition starts added to the default start."
    )
    init_strategy: Literal["sur_residual_gmm", "random"] = Field(
        default="sur_residual_gmm", description="Strategy of the first start."
    )
    init_max_iter: int = Field(
        default=100,
        gt=0,
        description="Iterations of the Gaussian mixture fit on SUR residuals used to initialize.",
    )
    seed: int = Field(default=0, ge=0, description="Root seed; each start derives its own.")

    @property
    def n_starts(self) -> int:
        return 1 + self.n_random_starts


class ConvergenceStatus(str, Enum):
    AITKEN = "aitken"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class StartOutcome:
    """What happened to one EM start."""

    index: int
    strategy: str
    loglik: float | None = None
    n_iter: int = 0
    reason: str | None = None

    @property
    def failed(self) -> bool:
        return self.reason is not None


@dataclass(frozen=True)
class FitResult:
    """
    The outcome of `mixsur.model.em.fit`.

    Components are in canonical order: decreasing weight, ties broken by the intercepts.
    """

    theta: Theta
    loglik: float
    trace: tuple[float, ...]
    posteriors: Posteriors
    status: ConvergenceStatus
    npar: int
    bic: float
    start_index: int
    n_iter: int
    dataset: Dataset
    starts: tuple[StartOutcome, ...] = field(default_factory=tuple)

    @property
    def spec(self) -> ModelSpec:
        return self.dataset.spec

    @property
    def converged(self) -> bool:
        return self.status == ConvergenceStatus.AITKEN

    def to_json(self) -> dict:
        return {
            "theta": self.theta.to_json(),
            "loglik": self.loglik,
            "npar": self.npar,
            "bic": self.bic,
            "n_obs": self.dataset.n_obs,
            "status": self.status.value,
            "n_iter": self.n_iter,
            "start_index": self.start_index,
            "trace": list(self.trace),
            "starts": [
                {
                    "index": s.index,
                    "strategy": s.strategy,
                    "loglik": s.loglik,
                    "n_iter": s.n_iter,
                    "reason": s.reason,
                }
                for s in self.starts
            ],
        }
