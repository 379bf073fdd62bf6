import numpy as np
import pytest

from mixsur.model.core import build_augmented_design, pack
from mixsur.model.em import (
    aitken_converged,
    e_step,
    fit,
    initialize,
    m_step,
    run_em,
)
from mixsur.model.likelihood import (
    expected_complete_data_loglik,
    log_likelihood,
    responsibilities,
)
from mixsur.objects import (
    AllStartsFailed,
    ConvergenceStatus,
    Dataset,
    EmControls,
    EmptyComponent,
    MixSURError,
    ModelSpec,
    Posteriors,
    SingularSystem,
    Theta,
)


def feasible_gls(dataset, n_iter=2000, tol=1e-14):
    """Classical SUR by iterating GLS and the residual covariance to convergence."""
    D = dataset.spec.n_equations
    I = dataset.n_obs
    Z = np.stack([build_augmented_design(dataset.designs[i], 0, 1) for i in range(I)])
    sigma = np.eye(D)
    gamma = None
    for _ in range(n_iter):
        precision = np.linalg.inv(sigma)
        normal = np.einsum("iad,de,ibe->ab", Z, precision, Z)
        rhs = np.einsum("iad,de,ie->a", Z, precision, dataset.Y)
        updated = np.linalg.solve(normal, rhs)
        residuals = dataset.Y - np.einsum("iad,a->id", Z, updated)
        sigma = residuals.T @ residuals / I
        if gamma is not None and np.max(np.abs(updated - gamma)) < tol:
            gamma = updated
            break
        gamma = updated
    return gamma, sigma


def gaussian_mixture_em(Y, theta, n_iter=5000, tol=1e-12):
    """Textbook EM for a Gaussian mixture, returning the final log-likelihood."""
    dataset = Dataset(
        Y=Y,
        pool=np.zeros((Y.shape[0], 0)),
        spec=ModelSpec(regressors=((),) * Y.shape[1], n_components=theta.n_components),
    )
    previous = -np.inf
    for _ in range(n_iter):
        alpha = responsibilities(theta, dataset).probabilities
        sizes = alpha.sum(axis=0)
        means = (alpha.T @ Y) / sizes[:, None]
        covariances = []
        for k in range(theta.n_components):
            centred = Y - means[k]
            S = (alpha[:, k, None] * centred).T @ centred / sizes[k]
            covariances.append(0.5 * (S + S.T))
        theta = Theta(
            weights=sizes / sizes.sum(),
            beta=np.array([]),
            intercepts=means,
            covariances=np.stack(covariances),
        )
        current = log_likelihood(theta, dataset)
        if abs(current - previous) < tol:
            break
        previous = current
    return current


def test_e_step(make_instance):
    theta, dataset = make_instance(sizes=(1,), n_components=1, n_obs=10)
    assert np.array_equal(e_step(theta, dataset).probabilities, np.ones((10, 1)))

    theta, dataset = make_instance(sizes=(1, 1), n_components=3, n_obs=10, seed=2)
    assert np.array_equal(
        e_step(theta, dataset).probabilities, responsibilities(theta, dataset).probabilities
    )


def test_m_step_gaussian_mle():
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(50, 2)) @ np.array([[1.0, 0.5], [0.0, 1.0]])
    dataset = Dataset(Y=Y, pool=np.zeros((50, 0)), spec=ModelSpec(regressors=((), ())))
    theta = m_step(Posteriors(np.ones((50, 1))), dataset, np.eye(2)[None])
    assert np.allclose(theta.intercepts[0], Y.mean(axis=0), rtol=0, atol=1e-12)
    assert np.allclose(theta.covariances[0], np.cov(Y, rowvar=False, bias=True), atol=1e-12)
    assert theta.weights[0] == 1.0


def test_m_step_single_equation_is_ols():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 2))
    y = 0.3 + x @ np.array([1.0, -2.0]) + rng.normal(size=40)
    dataset = Dataset(Y=y[:, None], pool=x, spec=ModelSpec(regressors=((0, 1),)))
    theta = m_step(Posteriors(np.ones((40, 1))), dataset, np.ones((1, 1, 1)))
    ols, *_ = np.linalg.lstsq(np.column_stack([np.ones(40), x]), y, rcond=None)
    assert theta.intercepts[0, 0] == pytest.approx(ols[0], abs=1e-10)
    assert np.allclose(theta.beta, ols[1:], atol=1e-10)


def test_m_step_hard_labels_match_weighted_gls(make_instance):
    theta0, dataset = make_instance(sizes=(1, 2), n_components=2, n_obs=60, seed=3, gap=4.0)
    labels = np.arange(60) % 2
    posteriors = Posteriors.from_labels(labels, 2)
    theta = m_step(
        posteriors, dataset, theta0.covariances, inner_max_iter=2000, inner_tol=1e-14
    )
    assert np.allclose(theta.weights, [0.5, 0.5])

    # gamma solves the weighted GLS equations at the returned covariances
    p = posteriors.probabilities
    normal = np.zeros((2 * 2 + 3, 2 * 2 + 3))
    rhs = np.zeros(2 * 2 + 3)
    for k in range(2):
        precision = np.linalg.inv(theta.covariances[k])
        for i in range(60):
            Z = build_augmented_design(dataset.designs[i], k, 2)
            normal += p[i, k] * Z @ precision @ Z.T
            rhs += p[i, k] * Z @ precision @ dataset.Y[i]
    gamma = np.linalg.solve(normal, rhs)
    assert np.allclose(theta.intercepts.ravel(), gamma[:4], atol=1e-8)
    assert np.allclose(theta.beta, gamma[4:], atol=1e-8)

    # each covariance is the residual covariance of its own group
    for k in range(2):
        members = labels == k
        residuals = (
            dataset.Y[members]
            - theta.intercepts[k]
            - np.einsum("ipd,p->id", dataset.designs[members], theta.beta)
        )
        assert np.allclose(
            theta.covariances[k], residuals.T @ residuals / members.sum(), atol=1e-8
        )


def test_m_step_does_not_decrease_expected_loglik(make_instance):
    for seed in range(10):
        theta, dataset = make_instance(sizes=(1, 1), n_components=2, n_obs=50, seed=seed, gap=2.0)
        posteriors = responsibilities(theta, dataset)
        before = expected_complete_data_loglik(theta, dataset, posteriors)
        updated = m_step(posteriors, dataset, theta.covariances)
        after = expected_complete_data_loglik(updated, dataset, posteriors)
        assert after >= before - 1e-10, f"seed {seed}"


def test_m_step_empty_component(make_instance):
    _, dataset = make_instance(sizes=(1, 1), n_components=2, n_obs=20)
    posteriors = Posteriors.from_labels(np.zeros(20, dtype=int), 2)
    with pytest.raises(EmptyComponent) as error:
        m_step(posteriors, dataset, np.stack([np.eye(2), np.eye(2)]))
    assert error.value.k == 1


def test_m_step_singular_system():
    rng = np.random.default_rng(4)
    pool = np.column_stack([rng.normal(size=20), np.zeros(20)])
    dataset = Dataset(Y=rng.normal(size=(20, 1)), pool=pool, spec=ModelSpec(regressors=((0, 1),)))
    with pytest.raises(SingularSystem):
        m_step(Posteriors(np.ones((20, 1))), dataset, np.ones((1, 1, 1)))


def test_aitken_rule():
    assert not aitken_converged([-10.0], 1e-8)
    assert aitken_converged([-10.0, -10.0 + 1e-9], 1e-8)
    assert not aitken_converged([-10.0, -9.0], 1e-8)

    # geometric increments 1, 0.5: the limit is 1 away from the last value
    assert not aitken_converged([-1.0, 0.0, 1.0, 1.5], 1e-8)
    assert aitken_converged([-1.0, 0.0, 1e-10, 1.5e-10], 1e-8)

    # a >= 1 falls back to the plain difference
    assert not aitken_converged([-1.0, 0.0, 1.0, 2.0], 1e-8)
    assert aitken_converged([0.0, 0.0, 0.0, 0.0], 1e-8)


def test_aitken_rule_plain_difference_for_first_two_iterations():
    """
    Increments 2e-9 then 1.9e-9 (a = 0.95) put the Aitken limit 3.8e-8 above the
    last value. After two iterations only the plain step counts; from the third
    iteration on the same increments keep EM running.
    """
    assert aitken_converged([0.0, 2e-9, 3.9e-9], 1e-8), "Three values use |dl| < tol"
    assert not aitken_converged([-1.0, 0.0, 2e-9, 3.9e-9], 1e-8), (
        "Four values use the Aitken limit"
    )


def test_em_trace_is_monotone(make_instance):
    controls = EmControls(max_iter=200)
    completed = 0
    for seed in range(25):
        theta, dataset = make_instance(sizes=(1, 1), n_components=2, n_obs=60, seed=seed, gap=3.0)
        try:
            start = initialize(dataset, "random", seed, controls)
            _, _, trace, _ = run_em(dataset, start, controls)
        except MixSURError:
            continue
        assert np.all(np.diff(trace) >= -1e-10), f"seed {seed}"
        completed += 1
    assert completed >= 20


@pytest.mark.slow
def test_em_trace_is_monotone_many_seeds(make_instance):
    controls = EmControls()
    for seed in range(100):
        theta, dataset = make_instance(sizes=(2, 1), n_components=2, n_obs=200, seed=seed, gap=3.0)
        try:
            result = fit(dataset, controls)
        except AllStartsFailed:
            continue
        assert np.all(np.diff(result.trace) >= -1e-10), f"seed {seed}"


def test_single_component_fit_is_classical_sur(make_instance):
    _, dataset = make_instance(sizes=(2, 1), n_components=1, n_obs=80, seed=5)
    result = fit(dataset, EmControls(tol=1e-12, inner_tol=1e-14, inner_max_iter=2000))
    gamma, sigma = feasible_gls(dataset)
    assert np.allclose(result.theta.beta, gamma[2:], rtol=0, atol=1e-8)
    assert np.allclose(result.theta.intercepts[0], gamma[:2], rtol=0, atol=1e-8)
    assert np.allclose(result.theta.covariances[0], sigma, atol=1e-7)


def test_no_regressor_fit_is_gaussian_mixture(separated_instance):
    theta, dataset = separated_instance
    plain = dataset.with_spec(ModelSpec(regressors=((), ()), n_components=2))
    controls = EmControls(tol=1e-10)
    start = initialize(plain, "sur_residual_gmm", 0, controls)
    result = fit(plain, controls, theta0=start)
    oracle = gaussian_mixture_em(np.asarray(plain.Y), start)
    assert result.loglik == pytest.approx(oracle, abs=1e-6)


def test_initialize_single_component(make_instance):
    _, dataset = make_instance(sizes=(1, 2), n_components=1, n_obs=40)
    sur = initialize(dataset, "sur_residual_gmm", 0)
    random = initialize(dataset, "random", 123)
    assert np.array_equal(pack(sur), pack(random))


def test_initialize_straddles_components(separated_instance):
    theta, dataset = separated_instance
    start = initialize(dataset, "sur_residual_gmm", 0)
    sd = np.sqrt(np.max([np.diag(s) for s in theta.covariances], axis=0))
    for k in range(2):
        distances = [
            np.max(np.abs(start.intercepts[k] - theta.intercepts[j]) / sd) for j in range(2)
        ]
        assert min(distances) < 3.0
    # one start component near each generating component
    nearest = [
        int(np.argmin([np.sum((start.intercepts[k] - theta.intercepts[j]) ** 2) for j in range(2)]))
        for k in range(2)
    ]
    assert sorted(nearest) == [0, 1]


def test_initialize_random_is_reproducible(make_instance):
    _, dataset = make_instance(sizes=(1, 1), n_components=2, n_obs=60, seed=1, gap=3.0)
    first = initialize(dataset, "random", 42)
    second = initialize(dataset, "random", 42)
    assert np.array_equal(pack(first), pack(second))


def test_initialize_user_and_unknown(make_instance):
    theta, dataset = make_instance(sizes=(1,), n_components=2, n_obs=20)
    assert initialize(dataset, "user", theta=theta) is theta
    with pytest.raises(ValueError):
        initialize(dataset, "user")
    with pytest.raises(ValueError):
        initialize(dataset, "nonsense")


def test_fit_result(separated_instance):
    theta, dataset = separated_instance
    result = fit(dataset, EmControls(n_random_starts=2, seed=3))
    assert result.status == ConvergenceStatus.AITKEN
    assert result.converged
    assert len(result.starts) == 3
    assert result.npar == 1 + 2 + 2 * 2 + 2 * 3
    assert result.bic == 2 * result.loglik - result.npar * np.log(400)
    assert result.loglik == result.trace[-1]
    assert result.n_iter == len(result.trace) - 1
    assert result.theta.weights[0] >= result.theta.weights[1], "canonical order"
    assert np.allclose(
        result.posteriors.probabilities,
        responsibilities(result.theta, dataset).probabilities,
        atol=1e-10,
    )
    assert np.all(np.abs(result.theta.beta - theta.beta) < 0.35)
    assert result.to_json()["status"] == "aitken"


def test_fit_fixed_point(separated_instance):
    _, dataset = separated_instance
    result = fit(dataset, EmControls(tol=1e-10))
    posteriors = e_step(result.theta, dataset)
    again = m_step(posteriors, dataset, result.theta.covariances)
    step = pack(again) - pack(result.theta)
    assert np.linalg.norm(step) / step.size < 1e-6


def test_fit_does_not_depend_on_n_jobs(make_instance):
    _, dataset = make_instance(sizes=(1, 1), n_components=2, n_obs=100, seed=4, gap=4.0)
    controls = EmControls(n_random_starts=2, seed=9)
    sequential = fit(dataset, controls, n_jobs=1)
    parallel = fit(dataset, controls, n_jobs=2)
    assert sequential.loglik == parallel.loglik
    assert np.array_equal(pack(sequential.theta), pack(parallel.theta))
    assert sequential.start_index == parallel.start_index


def test_all_starts_failed(make_instance):
    _, dataset = make_instance(sizes=(1, 1), n_components=3, n_obs=6)
    with pytest.raises(AllStartsFailed) as error:
        fit(dataset, EmControls(n_random_starts=1))
    assert sorted(error.value.reasons) == [0, 1]


@pytest.mark.slow
def test_parameter_recovery_monte_carlo(make_instance):
    """
    Two equations, two well-separated components, I=2000: every coefficient lies
    within 3 asymptotic standard errors of the truth in at least 95 of 100 seeds.
    """
    from mixsur.inference.estimates import standard_errors
    from mixsur.objects import ParameterLayout

    hits = 0
    for seed in range(100):
        theta, dataset = make_instance(sizes=(1, 1), n_components=2, n_obs=2000, seed=seed, gap=8.0)
        result = fit(dataset)
        se = standard_errors(result).to_numpy()[ParameterLayout(dataset.spec).beta]
        hits += bool(np.all(np.abs(result.theta.beta - theta.beta) < 3 * se))
    assert hits >= 95
