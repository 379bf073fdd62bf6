"""
Central finite-difference checks of the analytic score and Hessian.

The score is compared with differences of the log-likelihood and the Hessian with
differences of the analytic score, both in the packed parameter space. Alternative
callables can be passed in, which is how a wrong formula is shown to fail.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mixsur.config import Settings
from mixsur.config import settings as environment_settings
from mixsur.model.calculus import hessian, score
from mixsur.model.core import pack, unpack
from mixsur.model.likelihood import log_likelihood
from mixsur.objects import Dataset, ParameterLayout, Theta

SCORE_TOLERANCE = 1e-6
HESSIAN_TOLERANCE = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_relative_error: float
    worst_parameter: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_relative_error < self.tolerance)


@dataclass(frozen=True)
class GradcheckReport:
    score: CheckResult
    hessian: CheckResult

    @property
    def passed(self) -> bool:
        return self.score.passed and self.hessian.passed


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.abs(analytic - numeric) / scale


def finite_difference_steps(packed: np.ndarray, layout: ParameterLayout) -> np.ndarray:
    """
    Step max(1, |theta_j|) * 1e-5 per coordinate, shrunk for the free weights so that
    both pi_j and pi_K stay positive on either side.
    """
    steps = np.maximum(1.0, np.abs(packed)) * 1e-5
    if layout.K > 1:
        free = packed[layout.pi]
        last = 1.0 - free.sum()
        room = 0.5 * np.minimum(free, last)
        steps[layout.pi] = np.minimum(steps[layout.pi], room)
    return steps


def _central_differences(
    function: Callable[[np.ndarray], np.ndarray | float],
    packed: np.ndarray,
    steps: np.ndarray,
) -> np.ndarray:
    columns = []
    for j, h in enumerate(steps):
        forward = packed.copy()
        backward = packed.copy()
        forward[j] += h
        backward[j] -= h
        columns.append(
            (np.asarray(function(forward)) - np.asarray(function(backward))) / (2 * h)
        )
    return np.array(columns)


def check_score(
    theta: Theta,
    dataset: Dataset,
    score_fn: Callable[[Theta, Dataset], np.ndarray] | None = None,
    tolerance: float = SCORE_TOLERANCE,
) -> CheckResult:
    """
    Compare an analytic score with central differences of the log-likelihood.

    Args:
        theta (Theta): the point at which to check.
        dataset (Dataset): the sample.
        score_fn (Callable | None): returns the packed score; defaults to `score(...).vector`.
        tolerance (float): largest accepted relative error.
    """
    spec = dataset.spec
    layout = ParameterLayout(spec)
    if score_fn is None:
        score_fn = lambda t, ds: score(t, ds).vector

    packed = pack(theta)
    steps = finite_difference_steps(packed, layout)
    numeric = _central_differences(
        lambda p: log_likelihood(unpack(p, spec), dataset), packed, steps
    )
    analytic = np.asarray(score_fn(theta, dataset))
    errors = relative_error(analytic, numeric)
    worst = int(np.argmax(errors)) if errors.size else 0
    return CheckResult(
        name="score",
        max_relative_error=float(errors.max()) if errors.size else 0.0,
        worst_parameter=layout.names()[worst] if errors.size else "",
        tolerance=tolerance,
    )


def check_hessian(
    theta: Theta,
    dataset: Dataset,
    hessian_fn: Callable[[Theta, Dataset], np.ndarray] | None = None,
    score_fn: Callable[[Theta, Dataset], np.ndarray] | None = None,
    tolerance: float = HESSIAN_TOLERANCE,
) -> CheckResult:
    """Compare an analytic Hessian with central differences of the analytic score."""
    spec = dataset.spec
    layout = ParameterLayout(spec)
    if hessian_fn is None:
        hessian_fn = lambda t, ds: hessian(t, ds).matrix
    if score_fn is None:
        score_fn = lambda t, ds: score(t, ds).vector

    packed = pack(theta)
    steps = finite_difference_steps(packed, layout)
    # row j holds d score / d theta_j
    numeric = _central_differences(
        lambda p: score_fn(unpack(p, spec), dataset), packed, steps
    ).T
    analytic = np.asarray(hessian_fn(theta, dataset))
    errors = relative_error(analytic, numeric)
    if errors.size == 0:
        return CheckResult("hessian", 0.0, "", tolerance)
    row, col = np.unravel_index(int(np.argmax(errors)), errors.shape)
    names = layout.names()
    return CheckResult(
        name="hessian",
        max_relative_error=float(errors.max()),
        worst_parameter=f"{names[row]} / {names[col]}",
        tolerance=tolerance,
    )


def gradcheck(
    theta: Theta,
    dataset: Dataset,
    score_fn: Callable[[Theta, Dataset], np.ndarray] | None = None,
    hessian_fn: Callable[[Theta, Dataset], np.ndarray] | None = None,
    score_tolerance: float = SCORE_TOLERANCE,
    hessian_tolerance: float = HESSIAN_TOLERANCE,
    settings: Settings | None = None,
) -> GradcheckReport:
    if settings is None:
        settings = environment_settings
    logger = settings.logger

    score_result = check_score(theta, dataset, score_fn, score_tolerance)
    hessian_result = check_hessian(
        theta, dataset, hessian_fn, score_fn, hessian_tolerance
    )
    for result in (score_result, hessian_result):
        level = logging.INFO if result.passed else logging.WARNING
        logger.log(
            level,
            f"{result.name}: max relative error {result.max_relative_error:.3e} "
            f"at {result.worst_parameter or '-'} (tolerance {result.tolerance:g})",
        )
    return GradcheckReport(score=score_result, hessian=hessian_result)
