import functools
import json
import sys
from pathlib import Path

import click
import httpx
from pydantic import ValidationError
from rich import print

from mixsur.config import settings
from mixsur.inference.bootstrap import bootstrap_summary, parametric_bootstrap, simulate
from mixsur.inference.estimates import (
    classify,
    coefficient_inference,
    crosstab_chi_square,
    standard_errors,
)
from mixsur.inference.selection import MAX_CELLS, search
from mixsur.model.core import check_identifiability
from mixsur.model.em import fit
from mixsur.model.gradcheck import gradcheck
from mixsur.objects import (
    AllStartsFailed,
    ConfigError,
    DegenerateTable,
    MixSURError,
    NotPositiveDefinite,
    ParameterLayout,
    Theta,
)
from mixsur.util.datasets import AIS_URL, fetch_ais, make_ais_standin
from mixsur.util.parsing import (
    RunConfig,
    bind_columns,
    ingest,
    load_run_config,
    numeric_columns,
    parse_equation,
    parse_k_range,
    read_factor,
    read_frame,
)
from mixsur.util.report import (
    bootstrap_report,
    fit_report,
    gradcheck_report,
    selection_report,
)

# without --slow
DESK_MAX_CELLS = 1024
DESK_MAX_BOOTSTRAP = 1000


class _Command(click.Command):
    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            # exit code 2 is reserved for fits where every start failed
            e.exit_code = 1
            raise


class _Group(click.Group):
    command_class = _Command

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def resolve_command(self, ctx, args):
        try:
            return super().resolve_command(ctx, args)
        except click.UsageError as e:
            e.exit_code = 1
            raise


@click.group(cls=_Group)
def cli():
    """Mixtures of seemingly unrelated regressions."""
    pass


def run_options(function):
    options = [
        click.option("--data", default=None, help="Delimited data file with a header row."),
        click.option(
            "--config", "config_path", default=None, help="JSON run configuration."
        ),
        click.option(
            "--equation",
            "equations",
            multiple=True,
            help="RESPONSE=REG1,REG2 (repeat once per equation, in order).",
        ),
        click.option("--delimiter", default=None, help="Force the field delimiter."),
        click.option("--k", type=int, default=None, help="Number of mixture components."),
        click.option(
            "--k-range", default=None, help="Component counts to search, e.g. 1-3 or 1,3."
        ),
        click.option("--max-iter", type=int, default=None, help="Cap on EM iterations."),
        click.option("--tol", type=float, default=None, help="Aitken stopping tolerance."),
        click.option(
            "--starts", type=int, default=None, help="Random restarts added to the default start."
        ),
        click.option("--seed", type=int, default=None, help="Root random seed."),
        click.option(
            "--bootstrap-b", type=int, default=None, help="Number of bootstrap replicates."
        ),
        click.option("--level", type=float, default=None, help="Confidence level."),
        click.option("--out", default=None, help="Output directory."),
        click.option("--theta", default=None, help="Parameter JSON file."),
        click.option(
            "--factor", default=None, help="Column cross-tabulated against the clusters."
        ),
        click.option(
            "--slow", is_flag=True, default=False, help="Allow large grids and bootstrap runs."
        ),
        click.option(
            "--deny-unidentifiable",
            is_flag=True,
            default=False,
            help="Refuse models that fail the identifiability check.",
        ),
        click.option(
            "--n-jobs", type=int, default=None, help="Parallel workers (-1 for all cores)."
        ),
    ]
    for option in reversed(options):
        function = option(function)
    return function


def build_config(
    config_path=None,
    data=None,
    equations=(),
    delimiter=None,
    k=None,
    k_range=None,
    max_iter=None,
    tol=None,
    starts=None,
    seed=None,
    bootstrap_b=None,
    level=None,
    out=None,
    theta=None,
    factor=None,
    slow=False,
    deny_unidentifiable=False,
    n_jobs=None,
) -> RunConfig:
    """Merge the JSON configuration with the flags; flags win."""
    if n_jobs is not None:
        settings.configure(n_jobs=n_jobs)
    em = {
        key: value
        for key, value in {
            "max_iter": max_iter,
            "tol": tol,
            "n_random_starts": starts,
            "seed": seed,
        }.items()
        if value is not None
    }
    return load_run_config(
        config_path,
        data=data,
        delimiter=delimiter,
        equations=[parse_equation(e).model_dump() for e in equations] or None,
        k=k,
        k_range=parse_k_range(k_range) if k_range is not None else None,
        em=em or None,
        bootstrap_b=bootstrap_b,
        level=level,
        out=out,
        theta=theta,
        factor=factor,
        slow=True if slow else None,
        deny_unidentifiable=True if deny_unidentifiable else None,
    )


def exit_codes(function):
    """0 on success, 2 when every EM start failed, 1 for every other error."""

    @functools.wraps(function)
    def wrapper(*args, **kwargs):
        try:
            code = function(*args, **kwargs)
        except AllStartsFailed as e:
            settings.logger.error(str(e))
            sys.exit(2)
        except (MixSURError, OSError, ValidationError) as e:
            settings.logger.error(f"{type(e).__name__}: {e}")
            sys.exit(1)
        sys.exit(code or 0)

    return wrapper


def _require_data(config: RunConfig) -> str:
    if config.data is None:
        raise ConfigError("No data file given (use --data or 'data' in the configuration)")
    if not config.equations:
        raise ConfigError("No equations given (use --equation or 'equations' in the configuration)")
    return config.data


def _load_theta(path: str | None) -> Theta:
    if path is None:
        raise ConfigError("No parameter file given (use --theta)")
    try:
        with open(path, "r") as f:
            return Theta.from_json(json.load(f))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Could not read parameters from {path}: {e}")


def _fit_checked(config: RunConfig, n_components: int):
    dataset = ingest(_require_data(config), config.equations, n_components, config.delimiter)
    identifiability = check_identifiability(dataset)
    if not identifiability.ok:
        if config.deny_unidentifiable:
            raise ConfigError(f"Model is not identifiable: {identifiability}")
        settings.logger.warning(f"Model may not be identifiable: {identifiability}")
    return dataset, fit(dataset, config.em)


def _beta_standard_errors(result):
    try:
        se = standard_errors(result)
    except NotPositiveDefinite as e:
        settings.logger.warning(f"No standard errors: {e}")
        return None
    return se


def _write_theta(theta: Theta, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "theta.json", "w") as f:
        json.dump(theta.to_json(), f, indent=2)


@cli.command("fit")
@run_options
@exit_codes
def fit_command(config_path, **flags):
    """
    Fit one model and report estimates, standard errors and intervals.
    """
    config = build_config(config_path, **flags)
    dataset, result = _fit_checked(config, config.k)

    se = _beta_standard_errors(result)
    intervals = coefficient_inference(result, config.level) if se is not None else None

    crosstab = None
    if config.factor is not None:
        factor = read_factor(config.data, config.factor, config.delimiter)
        try:
            crosstab = crosstab_chi_square(classify(result.posteriors), factor)
        except DegenerateTable as e:
            settings.logger.warning(f"No association test: {e}")

    report = fit_report(result, intervals, se, crosstab, config.level)
    out = Path(config.out)
    report.write(out, config.formats)
    _write_theta(result.theta, out)
    print(
        f"[bold green]loglik {result.loglik!r}, BIC {result.bic!r} "
        f"({result.status.value}); report written to {out}[/bold green]"
    )
    return 0


@cli.command("select")
@run_options
@exit_codes
def select_command(config_path, **flags):
    """
    Search every subset of each equation's candidate regressors for each K.
    """
    config = build_config(config_path, **flags)
    dataset = ingest(_require_data(config), config.equations, 1, config.delimiter)
    grid = search(
        dataset,
        dataset.spec.regressors,
        config.k_range,
        config.em,
        max_cells=MAX_CELLS if config.slow else DESK_MAX_CELLS,
    )
    out = Path(config.out)
    selection_report(grid).write(out, config.formats)
    grid.to_frame().to_csv(out / "bic_grid.csv", index=False, float_format="%.17g")
    grid.best_by_size().to_csv(out / "best_by_size.csv", index=False, float_format="%.17g")

    best = grid.best
    if best is None:
        settings.logger.error(f"All {grid.n_cells} models failed")
        return 2
    print(
        f"[bold green]best: K={best.n_components}, P={best.n_regressors}, "
        f"BIC {best.bic!r}; grid written to {out}[/bold green]"
    )
    return 0


@cli.command("bootstrap")
@run_options
@exit_codes
def bootstrap_command(config_path, **flags):
    """
    Fit, then run a parametric bootstrap of the regression coefficients.
    """
    config = build_config(config_path, **flags)
    B = config.bootstrap_b
    if B > DESK_MAX_BOOTSTRAP and not config.slow:
        raise ConfigError(
            f"{B} replicates requested; more than {DESK_MAX_BOOTSTRAP} needs --slow"
        )
    dataset, result = _fit_checked(config, config.k)
    run = parametric_bootstrap(result, B, config.em, seed=config.em.seed)

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    run.to_csv(out / "replicates.csv")

    se = _beta_standard_errors(result)
    asymptotic = None
    if se is not None:
        asymptotic = se.to_numpy()[ParameterLayout(result.spec).beta]
    summary = bootstrap_summary(run, result, config.level, asymptotic)
    bootstrap_report(summary, B, len(run.failures)).write(out, config.formats)
    print(
        f"[bold green]{run.b_succeeded} of {B} replicates succeeded; "
        f"report written to {out}[/bold green]"
    )
    return 0


@cli.command("simulate")
@run_options
@exit_codes
def simulate_command(config_path, **flags):
    """
    Simulate responses at the parameters in --theta over the regressors in --data.
    """
    config = build_config(config_path, **flags)
    theta = _load_theta(config.theta)
    frame = read_frame(_require_data(config), config.delimiter)
    pool_names, spec = bind_columns(config.equations, theta.n_components)
    pool = numeric_columns(frame, pool_names)
    dataset = simulate(theta, pool, spec, seed=config.em.seed)

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    simulated = frame[pool_names].copy()
    for d, name in enumerate(spec.response_names):
        simulated[name] = dataset.Y[:, d]
    for j, name in enumerate(pool_names):
        simulated[name] = pool[:, j]
    columns = list(dict.fromkeys(list(spec.response_names) + pool_names))
    path = out / "simulated.csv"
    simulated[columns].to_csv(path, index=False, float_format="%.17g")
    print(f"[bold green]{dataset.n_obs} observations written to {path}[/bold green]")
    return 0


@cli.command("gradcheck")
@run_options
@exit_codes
def gradcheck_command(config_path, **flags):
    """
    Check the analytic score and Hessian against finite differences, at --theta or at a fit.
    """
    config = build_config(config_path, **flags)
    if config.theta is not None:
        theta = _load_theta(config.theta)
        dataset = ingest(
            _require_data(config), config.equations, theta.n_components, config.delimiter
        )
        theta.check_spec(dataset.spec)
    else:
        dataset, result = _fit_checked(config, config.k)
        theta = result.theta

    result = gradcheck(theta, dataset)
    gradcheck_report(result).write(Path(config.out), config.formats)
    if result.passed:
        print("[bold green]analytic derivatives agree with finite differences[/bold green]")
        return 0
    settings.logger.error("Analytic derivatives disagree with finite differences")
    return 1


@cli.command("fetch-ais")
@click.option("--dest", default="ais.csv", help="Where to write the converted file.")
@click.option("--url", default=AIS_URL, help="Source of the public AIS CSV.")
@exit_codes
def fetch_ais_command(dest, url):
    """
    Download the AIS athletes data and convert it to the BMI, SSF, PBF, LBM, RCC, WCC, PFC, Sex layout.
    """
    try:
        fetch_ais(dest, url)
    except httpx.HTTPError as e:
        settings.logger.error(f"Download failed: {e}")
        return 1
    return 0


@cli.command("ais-standin")
@click.option("--dest", default="ais_standin.csv", help="Where to write the synthetic data.")
@click.option("--seed", type=int, default=0, help="Random seed.")
@click.option("--n-obs", type=int, default=202, help="Number of athletes.")
@exit_codes
def ais_standin_command(dest, seed, n_obs):
    """
    Write synthetic data with the AIS columns, drawn from the published best model.
    """
    make_ais_standin(seed, n_obs).to_csv(dest, index=False, float_format="%.17g")
    print(f"[bold green]{n_obs} synthetic athletes written to {dest}[/bold green]")
    return 0


if __name__ == "__main__":
    cli()
