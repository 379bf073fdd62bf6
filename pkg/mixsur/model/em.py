import logging
import warnings

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import LinAlgError, LinAlgWarning, cho_solve, solve

from mixsur.config import Settings
from mixsur.config import settings as environment_settings
from mixsur.model.core import (
    bic,
    canonical_order,
    check_identifiability,
    count_parameters,
    linear_predictor,
    vech,
)
from mixsur.model.likelihood import factor_covariance, posteriors_and_loglik, responsibilities
from mixsur.objects import (
    AllStartsFailed,
    ConvergenceStatus,
    Dataset,
    EmControls,
    EmptyComponent,
    FitResult,
    MixSURError,
    ModelSpec,
    Posteriors,
    SingularSystem,
    StartOutcome,
    Theta,
)
from mixsur.util.parallel import run_tasks

MONOTONE_SLACK = 1e-10


def e_step(theta: Theta, dataset: Dataset) -> Posteriors:
    return responsibilities(theta, dataset)


def _solve_normal_equations(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            solution = solve(matrix, rhs, assume_a="pos")
        except (LinAlgError, LinAlgWarning, ValueError) as e:
            raise SingularSystem(
                f"The normal matrix of the intercepts and coefficients is singular ({e})"
            )
    if not np.all(np.isfinite(solution)):
        raise SingularSystem("The normal equations produced non-finite coefficients")
    return solution


def m_step(
    posteriors: Posteriors,
    dataset: Dataset,
    sigma_init: np.ndarray,
    inner_max_iter: int = 500,
    inner_tol: float = 1e-8,
) -> Theta:
    """
    Maximize the expected complete-data log-likelihood given the posteriors.

    The weights are z_k / I. Then gamma = (lambda_1, ..., lambda_K, beta) and the
    covariances are updated in turn, gamma by weighted GLS given Sigma and each Sigma_k
    as the weighted residual covariance given gamma, until consecutive
    (gamma, v(Sigma_1), ..., v(Sigma_K)) stacks are closer than `inner_tol` in mean
    Euclidean distance or `inner_max_iter` is reached.

    Args:
        posteriors (Posteriors): responsibilities, shape (I, K).
        dataset (Dataset): the sample.
        sigma_init (np.ndarray): covariances the inner loop starts from, shape (K, D, D).
        inner_max_iter (int): cap on inner iterations.
        inner_tol (float): inner stopping tolerance.

    Returns:
        Theta: the updated parameters.
    """
    p = posteriors.probabilities
    I, K = p.shape
    D = dataset.spec.n_equations
    P = dataset.spec.n_regressors
    X = dataset.designs
    Y = dataset.Y

    if I != dataset.n_obs:
        raise ValueError("Posteriors and dataset have a different number of observations")

    sizes = p.sum(axis=0)
    for k in range(K):
        if sizes[k] < D + 1:
            raise EmptyComponent(k, float(sizes[k]), D + 1)
    weights = sizes / sizes.sum()

    weighted_X = [np.einsum("i,ipd->pd", p[:, k], X) for k in range(K)]
    weighted_Y = p.T @ Y

    sigma = np.array(sigma_init, dtype=float).reshape(K, D, D)
    n = D * K + P
    beta_block = slice(D * K, n)
    previous = None

    for _ in range(inner_max_iter):
        normal = np.zeros((n, n))
        rhs = np.zeros(n)
        for k in range(K):
            chol = factor_covariance(sigma[k], k)
            precision = cho_solve((chol, True), np.eye(D))
            block = slice(k * D, (k + 1) * D)
            normal[block, block] = sizes[k] * precision
            cross = precision @ weighted_X[k].T
            normal[block, beta_block] = cross
            normal[beta_block, block] = cross.T
            XP = np.einsum("ipd,de->ipe", X, precision)
            normal[beta_block, beta_block] += np.einsum("i,ipe,iqe->pq", p[:, k], XP, X)
            rhs[block] = precision @ weighted_Y[k]
            rhs[beta_block] += np.einsum("i,ipe,ie->p", p[:, k], XP, Y)

        gamma = _solve_normal_equations(0.5 * (normal + normal.T), rhs)
        intercepts = gamma[: D * K].reshape(K, D)
        beta = gamma[beta_block]

        mean = linear_predictor(dataset, beta)
        updated = np.empty_like(sigma)
        for k in range(K):
            residuals = Y - intercepts[k] - mean
            S = np.einsum("i,id,ie->de", p[:, k], residuals, residuals) / sizes[k]
            updated[k] = 0.5 * (S + S.T)
            factor_covariance(updated[k], k)
        sigma = updated

        stack = np.concatenate([gamma, vech(sigma).ravel()])
        if previous is not None:
            distance = np.linalg.norm(stack - previous) / stack.size
            if distance < inner_tol:
                break
        previous = stack

    return Theta(weights=weights, beta=beta, intercepts=intercepts, covariances=sigma)


def aitken_converged(trace: list[float], tol: float) -> bool:
    """
    Aitken stopping rule on the log-likelihood trace l^(0), ..., l^(r+1).

    With a = (l^(r+1) - l^(r)) / (l^(r) - l^(r-1)) the asymptotic estimate is
    l_inf = l^(r) + (l^(r+1) - l^(r)) / (1 - a), and the run stops when
    |l_inf - l^(r)| < tol. The first two iterations (traces of up to three values),
    a >= 1 and a vanishing denominator use |l^(r+1) - l^(r)| < tol instead.
    """
    if len(trace) < 2:
        return False
    step = trace[-1] - trace[-2]
    if len(trace) < 4:
        return abs(step) < tol
    denominator = trace[-2] - trace[-3]
    if abs(denominator) < 1e-300:
        return abs(step) < tol
    a = step / denominator
    if a >= 1:
        return abs(step) < tol
    l_inf = trace[-2] + step / (1 - a)
    return abs(l_inf - trace[-2]) < tol


def run_em(
    dataset: Dataset,
    theta: Theta,
    controls: EmControls,
    max_iter: int | None = None,
    logger: logging.Logger | None = None,
) -> tuple[Theta, Posteriors, list[float], ConvergenceStatus]:
    """A single EM run from `theta`."""
    if logger is None:
        logger = environment_settings.logger
    if max_iter is None:
        max_iter = controls.max_iter

    posteriors, loglik = posteriors_and_loglik(theta, dataset)
    trace = [loglik]
    status = ConvergenceStatus.MAX_ITER
    for r in range(max_iter):
        theta = m_step(
            posteriors,
            dataset,
            theta.covariances,
            inner_max_iter=controls.inner_max_iter,
            inner_tol=controls.inner_tol,
        )
        posteriors, loglik = posteriors_and_loglik(theta, dataset)
        if loglik < trace[-1] - MONOTONE_SLACK:
            logger.warning(
                f"EM log-likelihood decreased by {trace[-1] - loglik:.3e} at iteration {r + 1}"
            )
        trace.append(loglik)
        logger.debug(f"EM iteration {r + 1}: loglik {loglik:.10f}")
        if aitken_converged(trace, controls.tol):
            status = ConvergenceStatus.AITKEN
            break
    return theta, posteriors, trace, status


def _sample_covariance(values: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.cov(values, rowvar=False, bias=True))


def _sur_start(dataset: Dataset, controls: EmControls) -> Theta:
    """Classical SUR by iterated feasible GLS: one M-step with every weight on a single component."""
    D = dataset.spec.n_equations
    single = dataset.with_spec(dataset.spec.with_components(1))
    return m_step(
        Posteriors(np.ones((dataset.n_obs, 1))),
        single,
        np.eye(D)[None],
        inner_max_iter=controls.inner_max_iter,
        inner_tol=controls.inner_tol,
    )


def _kmeans_labels(values: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    scale = values.std(axis=0)
    scale[scale == 0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, labels = kmeans2(values / scale, K, minit="++", seed=rng)
    return labels


def initialize(
    dataset: Dataset,
    strategy: str = "sur_residual_gmm",
    seed: int | np.random.Generator | None = 0,
    controls: EmControls | None = None,
    theta: Theta | None = None,
    logger: logging.Logger | None = None,
) -> Theta:
    """
    Starting parameters for EM.

    Strategies:
        - "sur_residual_gmm": fit classical SUR, then a Gaussian mixture to its residuals
          (started from a seeded k-means partition); lambda_k is the SUR intercept plus
          the k-th residual mean.
        - "random": a seeded random partition of the observations into K groups, then one M-step.
        - "user": `theta`, checked against the model.

    With K = 1 every strategy except "user" returns the classical SUR fit.
    """
    if controls is None:
        controls = EmControls()
    spec = dataset.spec
    K, D = spec.n_components, spec.n_equations
    rng = np.random.default_rng(seed)

    if strategy == "user":
        if theta is None:
            raise ValueError("The 'user' strategy needs starting parameters")
        theta.check_spec(spec)
        return theta

    sur = _sur_start(dataset, controls)
    if K == 1:
        return sur

    if strategy == "sur_residual_gmm":
        residuals = dataset.Y - sur.intercepts[0] - linear_predictor(dataset, sur.beta)
        residual_data = Dataset(
            Y=residuals,
            pool=np.zeros((dataset.n_obs, 0)),
            spec=ModelSpec(regressors=((),) * D, n_components=K),
        )
        labels = _kmeans_labels(residuals, K, rng)
        start = m_step(
            Posteriors.from_labels(labels, K),
            residual_data,
            np.repeat(_sample_covariance(residuals)[None], K, axis=0),
            inner_max_iter=controls.inner_max_iter,
            inner_tol=controls.inner_tol,
        )
        mixture, _, _, _ = run_em(
            residual_data, start, controls, max_iter=controls.init_max_iter, logger=logger
        )
        return Theta(
            weights=mixture.weights,
            beta=sur.beta,
            intercepts=sur.intercepts[0] + mixture.intercepts,
            covariances=mixture.covariances,
        )

    if strategy == "random":
        labels = np.empty(dataset.n_obs, dtype=int)
        for k, members in enumerate(np.array_split(rng.permutation(dataset.n_obs), K)):
            labels[members] = k
        return m_step(
            Posteriors.from_labels(labels, K),
            dataset,
            np.repeat(_sample_covariance(dataset.Y)[None], K, axis=0),
            inner_max_iter=controls.inner_max_iter,
            inner_tol=controls.inner_tol,
        )

    raise ValueError(f"Unknown initialization strategy: {strategy}")


def _run_start(
    dataset: Dataset,
    controls: EmControls,
    index: int,
    strategy: str,
    theta0: Theta | None,
    logger: logging.Logger,
):
    # start `index` draws from its own child of the root seed
    rng = np.random.default_rng(np.random.SeedSequence(controls.seed, spawn_key=(index,)))
    try:
        start = initialize(dataset, strategy, rng, controls, theta0, logger)
        theta, posteriors, trace, status = run_em(dataset, start, controls, logger=logger)
    except MixSURError as e:
        logger.warning(f"EM start {index} ({strategy}) failed: {e}")
        return StartOutcome(index=index, strategy=strategy, reason=str(e)), None

    outcome = StartOutcome(
        index=index, strategy=strategy, loglik=trace[-1], n_iter=len(trace) - 1
    )
    logger.info(
        f"EM start {index} ({strategy}): loglik {trace[-1]:.6f} after {len(trace) - 1} iterations ({status.value})"
    )
    return outcome, (theta, posteriors, trace, status)


def fit(
    dataset: Dataset,
    controls: EmControls | None = None,
    theta0: Theta | None = None,
    settings: Settings | None = None,
    n_jobs: int | None = None,
) -> FitResult:
    """
    Fit a mixture SUR model by EM, keeping the best of several starts.

    Start 0 uses `theta0` when given, otherwise `controls.init_strategy`; starts
    1..n_random_starts use random partitions. Each start gets its own child of
    `controls.seed`, so the result does not depend on `n_jobs`.

    Args:
        dataset (Dataset): the sample, bound to the model to fit.
        controls (EmControls | None): stopping rules and starts. Defaults to `EmControls()`.
        theta0 (Theta | None): optional user-supplied starting parameters for start 0.
        settings (Settings | None): settings to use. Defaults to the global settings.
        n_jobs (int | None): overrides `settings.N_JOBS` for the starts.

    Returns:
        FitResult: the winning start, with components in canonical order.

    Raises:
        AllStartsFailed: if every start hit a singular matrix or an empty component.
    """
    if settings is None:
        settings = environment_settings
    if controls is None:
        controls = EmControls()
    logger = settings.logger

    spec = dataset.spec
    npar = count_parameters(spec)
    identifiability = check_identifiability(dataset)
    if not identifiability.ok:
        logger.warning(f"Model may not be identifiable: {identifiability}")
    if dataset.n_obs <= npar:
        logger.warning(
            f"Only {dataset.n_obs} observations for {npar} free parameters"
        )

    tasks = []
    for index in range(controls.n_starts):
        if index == 0:
            strategy = "user" if theta0 is not None else controls.init_strategy
            tasks.append((dataset, controls, index, strategy, theta0, logger))
        else:
            tasks.append((dataset, controls, index, "random", None, logger))

    results = run_tasks(_run_start, tasks, n_jobs or settings.N_JOBS)

    starts = tuple(outcome for outcome, _ in results)
    successes = [(outcome, run) for outcome, run in results if run is not None]
    if not successes:
        raise AllStartsFailed({s.index: s.reason or "" for s in starts})

    # max() keeps the first of equal values, i.e. the lowest start index
    best_outcome, (theta, posteriors, trace, status) = max(
        successes, key=lambda item: item[0].loglik
    )

    order = canonical_order(theta)
    theta = theta.permuted(order)
    posteriors = Posteriors(posteriors.probabilities[:, order])

    loglik = trace[-1]
    result = FitResult(
        theta=theta,
        loglik=loglik,
        trace=tuple(trace),
        posteriors=posteriors,
        status=status,
        npar=npar,
        bic=bic(loglik, npar, dataset.n_obs),
        start_index=best_outcome.index,
        n_iter=len(trace) - 1,
        dataset=dataset,
        starts=starts,
    )
    logger.info(
        f"Fitted K={spec.n_components}, P={spec.n_regressors}: loglik {loglik:.6f}, "
        f"BIC {result.bic:.4f} (start {best_outcome.index}, {status.value})"
    )
    return result
