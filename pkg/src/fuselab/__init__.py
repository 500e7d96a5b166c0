"""Fuse observational and randomized treatment-effect estimates, and plan
which interventions to randomize next.

The pieces, bottom up:

* :mod:`fuselab.data_model`  round containers, the intervention catalog,
  loss weights, the pooled estimate state, and their CSV forms.
* :mod:`fuselab.estimators`  randomized difference-in-means and the doubly
  robust observational estimator with its plug-in covariance.
* :mod:`fuselab.fusion`      the bias regression on intervention features,
  the estimated-risk curve, and the risk-optimal shrinkage between the
  observational and debiased estimates.
* :mod:`fuselab.design`      variance posteriors and the selection rules
  (Thompson, optimistic, random, spread-maximizing).
* :mod:`fuselab.simlab`      the synthetic experiment generator, the round
  loop, and replication with paired seeds.
* :mod:`fuselab.cli`         the ``fuselab`` command.
"""

from .basis import PolynomialMap, SplineBasis, SplineSpec, fit_basis
from .data_model import (
    EstimateState,
    InterventionCatalog,
    LossWeights,
    ObservationalRound,
    RctRound,
    identity_weights,
    load_catalog,
    load_round,
    save_catalog,
    save_round,
    weighted_loss,
)
from .design import (
    DesignPosterior,
    Hyperparams,
    SelectionDecision,
    next_stage_risk,
    posterior_moments,
    posterior_update,
    sample_variances,
    select_dopt,
    select_random,
    select_thompson,
    select_ucb,
)
from .errors import (
    ConfigError,
    DecompositionError,
    DegenerateBiasError,
    DomainError,
    FitError,
    FuselabError,
    IdentifiabilityError,
    InsufficientDataError,
    MaskedVarianceError,
    ParseError,
    ValidationError,
)
from .estimators import (
    OutcomeModel,
    PropensityModel,
    build_estimate_state,
    dr_covariance,
    dr_estimate,
    fit_outcome,
    fit_propensity,
    rct_estimate,
    rct_estimates,
)
from .fusion import (
    BiasFit,
    FusionResult,
    analytic_risk,
    assemble_cov,
    debiased_cov,
    estimated_risk,
    fit_bias,
    fully_debiased,
    fuse,
    optimal_shrinkage,
    risk_curve,
    shrink,
    simultaneous_diagonalize,
)
from .simlab import (
    PRESETS,
    RoundTrace,
    RunResult,
    SimConfig,
    aggregate,
    preset,
    replicate,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # basis
    "PolynomialMap", "SplineBasis", "SplineSpec", "fit_basis",
    # data model
    "EstimateState", "InterventionCatalog", "LossWeights", "ObservationalRound",
    "RctRound", "identity_weights", "load_catalog", "load_round", "save_catalog",
    "save_round", "weighted_loss",
    # estimators
    "OutcomeModel", "PropensityModel", "build_estimate_state", "dr_covariance",
    "dr_estimate", "fit_outcome", "fit_propensity", "rct_estimate", "rct_estimates",
    # fusion
    "BiasFit", "FusionResult", "analytic_risk", "assemble_cov", "debiased_cov",
    "estimated_risk", "fit_bias", "fully_debiased", "fuse", "optimal_shrinkage",
    "risk_curve", "shrink", "simultaneous_diagonalize",
    # design
    "DesignPosterior", "Hyperparams", "SelectionDecision", "next_stage_risk",
    "posterior_moments", "posterior_update", "sample_variances", "select_dopt",
    "select_random", "select_thompson", "select_ucb",
    # simulation lab
    "PRESETS", "RoundTrace", "RunResult", "SimConfig", "aggregate", "preset",
    "replicate", "run_experiment",
    # errors
    "ConfigError", "DecompositionError", "DegenerateBiasError", "DomainError",
    "FitError", "FuselabError", "IdentifiabilityError", "InsufficientDataError",
    "MaskedVarianceError", "ParseError", "ValidationError",
]
