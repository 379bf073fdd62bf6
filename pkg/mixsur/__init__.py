from mixsur.__metadata__ import (
    __version__,
    __name__,
    __description__,
    __url__,
    __author__,
    __author_email__,
)

from mixsur.objects import (
    MixSURError,
    AllStartsFailed,
    ModelSpec,
    Theta,
    Dataset,
    Posteriors,
    ParameterLayout,
    EmControls,
    FitResult,
)
from mixsur.model.core import (
    build_design_matrix,
    build_augmented_design,
    count_parameters,
    check_identifiability,
    pack,
    unpack,
)
from mixsur.model.likelihood import log_likelihood, responsibilities
from mixsur.model.calculus import score, hessian, covariance_of_estimates
from mixsur.model.em import e_step, m_step, run_em, initialize, fit
from mixsur.model.gradcheck import gradcheck
from mixsur.inference.selection import bic, search
from mixsur.inference.estimates import (
    standard_errors,
    coefficient_inference,
    classify,
    chi_square_test,
    crosstab_chi_square,
)
from mixsur.inference.bootstrap import (
    simulate,
    parametric_bootstrap,
    percentile_ci,
    bootstrap_summary,
)
from mixsur.util.parsing import EquationBinding, ingest
from mixsur.config import Settings, settings, configure, set_from_env
