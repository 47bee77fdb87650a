"""Multiplicative structural mean models for count-outcome mediation analysis.

Estimates controlled direct and mediator effects on the rate-ratio scale
from weighted estimating equations that stay unbiased under unmeasured
mediator-outcome confounding, alongside traditional count-regression
comparators, robust and bootstrap inference, and a Monte Carlo study
engine.
"""

__version__ = "0.1.0"

from .core import (
    EffectEstimate,
    EstimationResult,
    IdentificationDiagnostics,
    ScoreSystem,
    build_score_system,
    center_weights,
    controlled_effects,
    default_contrasts,
    identification_check,
    score,
    score_jacobian,
    solve,
)
from .data import (
    AugmentationSpec,
    BasisTerm,
    ColumnSchema,
    Dataset,
    EffectSpec,
    WeightTerm,
    build_basis_matrix,
    build_weight_matrix,
    load_csv,
    parse_basis,
    parse_weights,
    write_csv,
)
from .estimators import CountRegression, LinearRegression, MsmmEstimator
from .exceptions import MsmmError
from .glm import GlmFit, fit_negbin, fit_ols, fit_poisson_irls, fit_quasipoisson
from .inference import (
    BootstrapRun,
    SandwichParts,
    bootstrap,
    compare_report,
    normal_quantile,
    sandwich_variance,
)
from .simulate import SimScenario, SimSummary, generate, parse_scenario_file, run_study

__all__ = [
    "AugmentationSpec",
    "BasisTerm",
    "BootstrapRun",
    "ColumnSchema",
    "CountRegression",
    "Dataset",
    "EffectEstimate",
    "EffectSpec",
    "EstimationResult",
    "GlmFit",
    "IdentificationDiagnostics",
    "LinearRegression",
    "MsmmError",
    "MsmmEstimator",
    "SandwichParts",
    "ScoreSystem",
    "SimScenario",
    "SimSummary",
    "WeightTerm",
    "bootstrap",
    "build_basis_matrix",
    "build_score_system",
    "build_weight_matrix",
    "center_weights",
    "compare_report",
    "controlled_effects",
    "default_contrasts",
    "fit_negbin",
    "fit_ols",
    "fit_poisson_irls",
    "fit_quasipoisson",
    "generate",
    "identification_check",
    "load_csv",
    "normal_quantile",
    "parse_basis",
    "parse_scenario_file",
    "parse_weights",
    "run_study",
    "sandwich_variance",
    "score",
    "score_jacobian",
    "solve",
    "write_csv",
]
