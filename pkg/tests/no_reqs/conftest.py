import numpy as np
import pytest

from mixsur.config import reset_settings
from mixsur.inference.bootstrap import simulate
from mixsur.objects import Dataset, ModelSpec, Theta


def spec_with_sizes(sizes, n_components=1) -> ModelSpec:
    """Equation d uses its own block of `sizes[d]` pool columns."""
    regressors, offset = [], 0
    for size in sizes:
        regressors.append(tuple(range(offset, offset + size)))
        offset += size
    return ModelSpec(regressors=tuple(regressors), n_components=n_components)


def random_covariance(rng, D, scale=1.0) -> np.ndarray:
    A = rng.normal(size=(D, D))
    S = scale * (A @ A.T / D + 0.5 * np.eye(D))
    return 0.5 * (S + S.T)


def random_theta(spec: ModelSpec, rng, gap=0.0) -> Theta:
    """Random valid parameters; component intercepts are `gap` apart in every equation."""
    K, D, P = spec.n_components, spec.n_equations, spec.n_regressors
    weights = rng.uniform(0.3, 1.0, K)
    weights = weights / weights.sum()
    intercepts = rng.normal(size=(K, D)) + gap * np.arange(K)[:, None]
    return Theta(
        weights=weights,
        beta=rng.normal(size=P),
        intercepts=intercepts,
        covariances=np.stack([random_covariance(rng, D) for _ in range(K)]),
    )


def random_dataset(theta: Theta, spec: ModelSpec, n_obs: int, rng) -> Dataset:
    pool_width = max([j for r in spec.regressors for j in r], default=-1) + 1
    pool = rng.normal(size=(n_obs, pool_width))
    return simulate(theta, pool, spec, seed=rng)


@pytest.fixture
def make_instance():
    """Factory for (theta, dataset) pairs drawn from a random mixture SUR model."""

    def _make(sizes=(1, 2), n_components=2, n_obs=30, seed=0, gap=0.0):
        rng = np.random.default_rng(seed)
        spec = spec_with_sizes(sizes, n_components)
        theta = random_theta(spec, rng, gap)
        return theta, random_dataset(theta, spec, n_obs, rng)

    return _make


@pytest.fixture
def separated_instance(make_instance):
    """Two well-separated components in two equations, large enough to fit reliably."""
    return make_instance(sizes=(1, 1), n_components=2, n_obs=400, seed=7, gap=6.0)


@pytest.fixture(autouse=True)
def restore_settings():
    yield
    reset_settings()
