import numpy as np
import pandas as pd
import pytest

from mixsur.inference import bootstrap
from mixsur.inference.bootstrap import (
    BootstrapRun,
    bootstrap_summary,
    parametric_bootstrap,
    percentile_ci,
    simulate,
)
from mixsur.model.em import fit
from mixsur.objects import (
    AllStartsFailed,
    Dataset,
    EmControls,
    ModelSpec,
    Theta,
    TooFewReplicates,
)


def simple_regression(seed=0, n_obs=100):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n_obs)
    y = 1.0 + 2.0 * x + rng.normal(scale=0.5, size=n_obs)
    return Dataset(Y=y[:, None], pool=x[:, None], spec=ModelSpec(regressors=((0,),)))


def test_simulate_near_degenerate_covariance():
    spec = ModelSpec(regressors=((0,), ()))
    theta = Theta(
        weights=np.array([1.0]),
        beta=np.array([2.0]),
        intercepts=np.array([[1.0, -1.0]]),
        covariances=1e-12 * np.eye(2)[None],
    )
    pool = np.linspace(-1, 1, 50)[:, None]
    dataset = simulate(theta, pool, spec, seed=0)
    expected = np.column_stack([1.0 + 2.0 * pool[:, 0], -np.ones(50)])
    assert np.max(np.abs(dataset.Y - expected)) < 1e-5


def test_simulate_mixture_moments():
    spec = ModelSpec(regressors=((),), n_components=2)
    weights = np.array([0.3, 0.7])
    means = np.array([-2.0, 1.0])
    variances = np.array([0.5, 2.0])
    theta = Theta(
        weights=weights,
        beta=np.array([]),
        intercepts=means[:, None],
        covariances=variances[:, None, None],
    )
    n_obs = 100_000
    dataset, labels = simulate(theta, np.zeros((n_obs, 0)), spec, seed=1, return_labels=True)
    y = dataset.Y[:, 0]

    mean = weights @ means
    variance = weights @ (variances + means**2) - mean**2
    assert abs(y.mean() - mean) < 4 * np.sqrt(variance / n_obs)
    assert y.var() == pytest.approx(variance, rel=0.05)

    frequency = np.mean(labels == 0)
    assert abs(frequency - 0.3) < 4 * np.sqrt(0.3 * 0.7 / n_obs)


def test_simulate_is_seeded(make_instance):
    theta, dataset = make_instance(sizes=(1, 1), n_components=2, n_obs=20)
    first = simulate(theta, dataset.pool, dataset.spec, seed=5)
    second = simulate(theta, dataset.pool, dataset.spec, seed=5)
    third = simulate(theta, dataset.pool, dataset.spec, seed=6)
    assert np.array_equal(first.Y, second.Y)
    assert not np.array_equal(first.Y, third.Y)


def test_percentile_interval():
    lo, hi = percentile_ci(np.arange(1, 101), 0.95)
    assert lo == pytest.approx(3.475)
    assert hi == pytest.approx(97.525)
    assert percentile_ci(np.full(10, 2.5), 0.9) == (2.5, 2.5)

    values = np.random.default_rng(0).normal(size=300)
    narrow = percentile_ci(values, 0.8)
    wide = percentile_ci(values, 0.95)
    assert wide[0] <= narrow[0] and narrow[1] <= wide[1]

    with pytest.raises(TooFewReplicates):
        percentile_ci(np.array([1.0]))
    with pytest.raises(ValueError):
        percentile_ci(np.arange(5), 1.5)


def test_empty_bootstrap():
    result = fit(simple_regression())
    run = parametric_bootstrap(result, 0)
    assert run.b_requested == 0
    assert run.b_succeeded == 0
    assert run.draws.shape == (0, 1)
    with pytest.raises(TooFewReplicates):
        bootstrap_summary(run, result)


def test_summary_of_identical_replicates():
    result = fit(simple_regression())
    beta = result.theta.beta
    run = BootstrapRun(
        b_requested=2, names=["y1~x1"], indices=[0, 1], draws=np.tile(beta, (2, 1))
    )
    summary = bootstrap_summary(run, result)
    assert summary.loc["y1~x1", "bias"] == 0.0
    assert summary.loc["y1~x1", "sd"] == 0.0
    assert summary.loc["y1~x1", "bias_ratio"] == 0.0


def test_summary_of_two_replicates():
    result = fit(simple_regression())
    run = BootstrapRun(
        b_requested=2, names=["y1~x1"], indices=[0, 1], draws=np.array([[1.0], [4.0]])
    )
    summary = bootstrap_summary(run, result, asymptotic_se=np.array([2.0]))
    row = summary.loc["y1~x1"]
    assert row["mean"] == 2.5
    assert row["sd"] == pytest.approx(3.0 / np.sqrt(2))
    assert row["bias"] == pytest.approx(2.5 - result.theta.beta[0])
    assert row["bias_ratio"] == pytest.approx(abs(row["bias"]) / row["sd"])
    assert row["se_relative_difference"] == pytest.approx((2.0 - row["sd"]) / row["sd"])
    assert summary.attrs["b_succeeded"] == 2
    assert list(summary.columns) == [
        "estimate",
        "mean",
        "sd",
        "bias",
        "bias_ratio",
        "ci_lower",
        "ci_upper",
        "asymptotic_se",
        "se_relative_difference",
    ]


def test_bootstrap_matches_ols_standard_error():
    """
    One equation, one component, B = 200: bootstrap sd of the slope is close to the OLS
    standard error and |bias| / sd stays below 0.1.

    |bias| / sd has Monte Carlo noise of about 1/sqrt(B), so the design and the
    bootstrap seed are frozen: simple_regression(seed=6), I = 100, bootstrap seed 8.
    """
    dataset = simple_regression(seed=6)
    result = fit(dataset)
    run = parametric_bootstrap(result, 200, seed=8)
    assert run.b_succeeded == 200
    assert not run.failures

    x = dataset.pool[:, 0]
    residuals = dataset.Y[:, 0] - result.theta.intercepts[0, 0] - result.theta.beta[0] * x
    ols_se = np.sqrt(np.mean(residuals**2) / np.sum((x - x.mean()) ** 2))

    summary = bootstrap_summary(run, result)
    assert summary.loc["y1~x1", "sd"] == pytest.approx(ols_se, rel=0.25)
    assert summary.loc["y1~x1", "ci_lower"] < result.theta.beta[0] < summary.loc["y1~x1", "ci_upper"]
    assert np.all(summary["bias_ratio"] < 0.1), summary["bias_ratio"]


@pytest.mark.slow
def test_bootstrap_bias_is_small():
    dataset = simple_regression(seed=2, n_obs=300)
    result = fit(dataset)
    summary = bootstrap_summary(parametric_bootstrap(result, 2000, seed=3), result)
    assert np.all(summary["bias_ratio"] < 0.1)


def test_bootstrap_is_deterministic_per_replicate(make_instance):
    _, dataset = make_instance(sizes=(1, 1), n_components=1, n_obs=60, seed=3)
    result = fit(dataset)
    first = parametric_bootstrap(result, 3, seed=4)
    second = parametric_bootstrap(result, 5, seed=4, keep_theta=True)
    assert np.array_equal(first.draws, second.draws[:3])
    assert len(second.thetas) == 5
    assert first.thetas is None


def test_bootstrap_records_failures(monkeypatch):
    result = fit(simple_regression())
    refit = bootstrap.fit_model
    calls = {"n": 0}

    def failing_on_odd_replicates(dataset, controls, settings=None, n_jobs=None):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise AllStartsFailed({0: "singular"})
        return refit(dataset, controls, settings=settings, n_jobs=n_jobs)

    monkeypatch.setattr(bootstrap, "fit_model", failing_on_odd_replicates)
    run = parametric_bootstrap(result, 6, seed=0)
    assert run.b_succeeded + len(run.failures) == 6
    assert sorted(run.failures) == [1, 3, 5]
    assert run.indices == [0, 2, 4]


def test_replicates_csv(tmp_path):
    run = BootstrapRun(
        b_requested=4,
        names=["y1~x1", "y2~x1"],
        indices=[0, 2, 3],
        draws=np.array([[0.1, 0.2], [0.3, 0.4], [1 / 3, 2 / 3]]),
        failures={1: "All 1 EM starts failed"},
    )
    sidecar = run.to_csv(tmp_path / "replicates.csv")
    frame = pd.read_csv(tmp_path / "replicates.csv", index_col="replicate")
    assert list(frame.columns) == ["y1~x1", "y2~x1"]
    assert list(frame.index) == [0, 2, 3]
    assert frame.loc[3, "y1~x1"] == 1 / 3, "values are written without loss"
    failures = pd.read_csv(sidecar)
    assert failures["replicate"].tolist() == [1]
