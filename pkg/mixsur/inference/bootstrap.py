from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from mixsur.config import Settings
from mixsur.config import settings as environment_settings
from mixsur.model.core import linear_predictor
from mixsur.model.em import fit as fit_model
from mixsur.model.likelihood import factor_covariance
from mixsur.objects import (
    AllStartsFailed,
    Dataset,
    EmControls,
    FitResult,
    ModelSpec,
    ParameterLayout,
    Theta,
    TooFewReplicates,
)
from mixsur.util.parallel import derive_seed, run_tasks, seed_sequence


def simulate(
    theta: Theta,
    pool: np.ndarray,
    spec: ModelSpec,
    seed: int | np.random.SeedSequence | np.random.Generator | None = 0,
    return_labels: bool = False,
) -> Dataset | tuple[Dataset, np.ndarray]:
    """
    Draw responses from the mixture SUR model over fixed regressors.

    For every observation a component z_i is drawn with probabilities pi, then
    y_i = lambda_{z_i} + X_i' beta + L_{z_i} e_i with e_i standard normal and L the
    Cholesky factor of Sigma_{z_i}. One row is drawn per row of `pool`.

    Args:
        theta (Theta): generating parameters.
        pool (np.ndarray): regressor pool, shape (I, R); use shape (I, 0) for no regressors.
        spec (ModelSpec): how pool columns enter the equations.
        seed: seed, seed sequence or generator.
        return_labels (bool): also return the 0-based component labels.
    """
    theta.check_spec(spec)
    rng = np.random.default_rng(seed)
    pool = np.asarray(pool, dtype=float)
    n_obs = pool.shape[0]
    K, D = theta.n_components, theta.n_equations

    chols = np.stack([factor_covariance(theta.covariances[k], k) for k in range(K)])
    labels = rng.choice(K, size=n_obs, p=theta.weights)
    noise = rng.standard_normal((n_obs, D))

    template = Dataset(Y=np.zeros((n_obs, D)), pool=pool, spec=spec)
    Y = (
        theta.intercepts[labels]
        + linear_predictor(template, theta.beta)
        + np.einsum("ide,ie->id", chols[labels], noise)
    )
    dataset = Dataset(Y=Y, pool=pool, spec=spec)
    if return_labels:
        return dataset, labels
    return dataset


@dataclass
class BootstrapRun:
    """
    Replicates of a parametric bootstrap.

    Attributes:
        b_requested (int): number of replicates asked for.
        names (list[str]): coefficient names, one per column of `draws`.
        indices (list[int]): replicate index of each row of `draws`.
        draws (np.ndarray): beta of every successful replicate, shape (B_succeeded, P).
        failures (dict[int, str]): failed replicate index -> reason.
        seed (int): root seed.
        thetas (list[Theta] | None): full estimates of the successful replicates, if kept.
    """

    b_requested: int
    names: list[str]
    indices: list[int]
    draws: np.ndarray
    failures: dict[int, str] = field(default_factory=dict)
    seed: int = 0
    thetas: list[Theta] | None = None

    @property
    def b_succeeded(self) -> int:
        return len(self.indices)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.draws, columns=self.names, index=pd.Index(self.indices, name="replicate")
        )

    def to_csv(self, path: str | Path) -> Path:
        """
        Write one row per successful replicate and a `<name>_failures.csv` sidecar
        listing the failed replicates. Returns the sidecar path.
        """
        path = Path(path)
        self.to_frame().to_csv(path, float_format="%.17g")
        sidecar = path.with_name(f"{path.stem}_failures.csv")
        pd.DataFrame(
            sorted(self.failures.items()), columns=["replicate", "reason"]
        ).to_csv(sidecar, index=False)
        return sidecar


def _run_replicate(
    fit: FitResult,
    controls: EmControls,
    seed: int,
    b: int,
    keep_theta: bool,
    settings: Settings,
):
    simulated = simulate(
        fit.theta, fit.dataset.pool, fit.spec, seed=seed_sequence(seed, b, 0)
    )
    replicate_controls = controls.model_copy(update={"seed": derive_seed(seed, b, 1)})
    try:
        result = fit_model(simulated, replicate_controls, settings=settings, n_jobs=1)
    except AllStartsFailed as e:
        settings.logger.warning(f"Bootstrap replicate {b} failed: {e}")
        return b, None, None, str(e)
    return b, result.theta.beta.copy(), result.theta if keep_theta else None, None


def parametric_bootstrap(
    fit: FitResult,
    B: int,
    controls: EmControls | None = None,
    seed: int = 0,
    keep_theta: bool = False,
    settings: Settings | None = None,
) -> BootstrapRun:
    """
    Parametric bootstrap of the regression coefficients.

    Each replicate simulates a sample at the fitted parameters over the observed
    regressors and refits it with the same model and controls. Replicate `b` only
    depends on (`seed`, `b`). Failed refits are recorded and left out.
    """
    if settings is None:
        settings = environment_settings
    if controls is None:
        controls = EmControls()
    if B < 0:
        raise ValueError("B must be non-negative")
    logger = settings.logger
    names = ParameterLayout(fit.spec).beta_names()

    tasks = [(fit, controls, seed, b, keep_theta, settings) for b in range(B)]
    results = run_tasks(_run_replicate, tasks, settings.N_JOBS)

    indices, draws, thetas, failures = [], [], [], {}
    for b, beta, theta, reason in sorted(results, key=lambda r: r[0]):
        if reason is not None:
            failures[b] = reason
            continue
        indices.append(b)
        draws.append(beta)
        thetas.append(theta)

    if B > 0 and not indices:
        logger.warning(f"All {B} bootstrap replicates failed")
    elif failures:
        logger.warning(f"{len(failures)} of {B} bootstrap replicates failed")
    else:
        logger.info(f"Completed {B} bootstrap replicates")

    return BootstrapRun(
        b_requested=B,
        names=names,
        indices=indices,
        draws=np.array(draws).reshape(len(indices), len(names)),
        failures=failures,
        seed=seed,
        thetas=thetas if keep_theta else None,
    )


def percentile_ci(values: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """
    Percentile interval at `level` using linear interpolation between order statistics.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        raise TooFewReplicates(values.shape[0])
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    lo, hi = np.quantile(values, [(1 - level) / 2, (1 + level) / 2], method="linear")
    return float(lo), float(hi)


def bootstrap_summary(
    run: BootstrapRun,
    fit: FitResult,
    level: float = 0.95,
    asymptotic_se: np.ndarray | None = None,
) -> pd.DataFrame:
    """
    Per-coefficient bootstrap mean, sd (denominator B_succeeded - 1), bias against the
    estimate, |bias| / sd, and percentile interval. With `asymptotic_se` the relative
    difference (asymptotic - bootstrap) / bootstrap of the standard errors is added.
    """
    if run.b_succeeded < 2:
        raise TooFewReplicates(run.b_succeeded)
    draws = run.draws
    mean = draws.mean(axis=0)
    sd = draws.std(axis=0, ddof=1)
    bias = mean - fit.theta.beta
    with np.errstate(divide="ignore", invalid="ignore"):
        bias_ratio = np.where(
            sd > 0, np.abs(bias) / sd, np.where(bias == 0, 0.0, np.inf)
        )
    intervals = [percentile_ci(draws[:, j], level) for j in range(draws.shape[1])]

    summary = pd.DataFrame(
        {
            "estimate": fit.theta.beta,
            "mean": mean,
            "sd": sd,
            "bias": bias,
            "bias_ratio": bias_ratio,
            "ci_lower": [lo for lo, _ in intervals],
            "ci_upper": [hi for _, hi in intervals],
        },
        index=run.names,
    )
    if asymptotic_se is not None:
        asymptotic_se = np.asarray(asymptotic_se, dtype=float)
        summary["asymptotic_se"] = asymptotic_se
        with np.errstate(divide="ignore", invalid="ignore"):
            summary["se_relative_difference"] = (asymptotic_se - sd) / sd
    summary.attrs["level"] = level
    summary.attrs["b_succeeded"] = run.b_succeeded
    return summary
