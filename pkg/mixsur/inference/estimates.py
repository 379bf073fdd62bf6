from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import chi2_contingency, norm
from scipy.stats.contingency import expected_freq

from mixsur.model.calculus import covariance_of_estimates, hessian
from mixsur.objects import (
    DegenerateTable,
    FitResult,
    ParameterLayout,
    Posteriors,
    Theta,
)


@dataclass(frozen=True)
class IntervalEstimate:
    name: str
    point: float
    se: float
    lo: float
    hi: float
    level: float


def normal_interval(
    point: float, se: float, level: float = 0.95, name: str = ""
) -> IntervalEstimate:
    """point -/+ z_{(1+level)/2} * se."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if se < 0:
        raise ValueError("standard error must be non-negative")
    half_width = norm.ppf((1 + level) / 2) * se
    return IntervalEstimate(
        name=name,
        point=float(point),
        se=float(se),
        lo=float(point - half_width),
        hi=float(point + half_width),
        level=level,
    )


def standard_errors(fit: FitResult) -> pd.Series:
    """
    Asymptotic standard errors of every packed parameter, the square roots of the
    diagonal of (-H)^{-1} at the estimate, indexed by parameter name.
    """
    covariance = covariance_of_estimates(hessian(fit.theta, fit.dataset))
    layout = ParameterLayout(fit.spec)
    return pd.Series(np.sqrt(np.diag(covariance)), index=layout.names(), name="se")


def coefficient_inference(fit: FitResult, level: float = 0.95) -> list[IntervalEstimate]:
    """Normal-theory intervals for the regression coefficients beta."""
    layout = ParameterLayout(fit.spec)
    se = standard_errors(fit).to_numpy()[layout.beta]
    return [
        normal_interval(point, s, level, name)
        for name, point, s in zip(layout.beta_names(), fit.theta.beta, se)
    ]


def intervals_frame(intervals: list[IntervalEstimate]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {"estimate": e.point, "se": e.se, "ci_lower": e.lo, "ci_upper": e.hi}
            for e in intervals
        ],
        index=[e.name for e in intervals],
    )


def classify(posteriors: Posteriors) -> np.ndarray:
    """MAP component of every observation, labelled 1..K; ties go to the lower label."""
    return np.argmax(posteriors.probabilities, axis=1) + 1


@dataclass(frozen=True)
class CrossTab:
    table: pd.DataFrame
    chi2: float
    df: int
    p_value: float


def chi_square_test(table: pd.DataFrame | np.ndarray) -> CrossTab:
    """Pearson chi-square test of independence, no continuity correction."""
    frame = pd.DataFrame(table)
    counts = frame.to_numpy(dtype=float)
    if counts.ndim != 2 or min(counts.shape) < 2:
        raise DegenerateTable(
            f"Need at least two levels in each margin, got a {counts.shape} table"
        )
    if np.any(expected_freq(counts) <= 0):
        raise DegenerateTable("Some expected counts are zero")
    statistic, p_value, df, _ = chi2_contingency(counts, correction=False)
    return CrossTab(table=frame, chi2=float(statistic), df=int(df), p_value=float(p_value))


def crosstab_chi_square(labels: np.ndarray, factor: np.ndarray | pd.Series) -> CrossTab:
    """Cross-tabulate cluster labels against a factor and test their association."""
    labels = pd.Series(np.asarray(labels), name="cluster")
    factor = pd.Series(np.asarray(factor), name=getattr(factor, "name", None) or "factor")
    if len(labels) != len(factor):
        raise DegenerateTable("Labels and factor have different lengths")
    return chi_square_test(pd.crosstab(labels, factor))


def covariance_table(theta: Theta, k: int, names: list[str] | None = None) -> pd.DataFrame:
    """
    Sigma_k with covariances on and above the diagonal and correlations below it.
    `k` is 0-based.
    """
    sigma = theta.covariances[k]
    sd = np.sqrt(np.diag(sigma))
    correlation = sigma / np.outer(sd, sd)
    out = np.where(np.tril(np.ones_like(sigma), k=-1) == 1, correlation, sigma)
    if names is None:
        names = [f"y{d + 1}" for d in range(theta.n_equations)]
    return pd.DataFrame(out, index=names, columns=names)
