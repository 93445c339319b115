"""Doubly robust treatment-effect estimation with two-phase validation data.

Estimates counterfactual means and the average treatment effect when both the
outcome and the treatment are measured with error, and the gold-standard pair
(a, y) is observed only on a validation subsample selected with known or
estimable probabilities that may depend on the error-prone measurements.
"""

from .data import (
    DEFAULT_LEARNER_MENU,
    KAPPA_MODES,
    CsvSchemaError,
    Dataset,
    EstimateResult,
    Observation,
    ScenarioConfig,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from .errors import (
    AllZeroWeights,
    DegenerateOutcomeRange,
    DegenerateWeights,
    DimensionMismatch,
    EmptyArm,
    GoldUnavailable,
    KTooLarge,
    MismatchedLength,
    MissingGoldStandard,
    MissingKappa,
    NonConvergence,
    SuperLearnerFailed,
    TooFewRows,
    TwoPhaseError,
    UnvalidatedRow,
)
from .estimators import (
    aipw_complete,
    aipw_pair,
    ate_from_arms,
    ensemble,
    onestep1,
    onestep2,
    plugin1,
    plugin2,
    tmle2,
    variance_from_ic,
)
from .learners import (
    FeatureCache,
    FoldAssignment,
    LearnerSpec,
    Predictor,
    expand_basis,
    fit_cell_means,
    fit_logistic_irls,
    fit_super_learner,
    fit_wls,
    make_folds,
    parse_learner,
)
from .nuisance import NuisanceSet, crossfit_predict, fit_kappa, fit_nuisances
from .simulation import (
    SIMULATION_METHODS,
    SUMMARY_COLUMNS,
    DgpParams,
    MonteCarloSummary,
    apply_two_phase,
    generate_complete,
    run_grid,
    run_replication,
    summarize_records,
    true_ate,
)

__version__ = "0.1.0"

__all__ = [
    "AllZeroWeights",
    "CsvSchemaError",
    "DEFAULT_LEARNER_MENU",
    "Dataset",
    "DegenerateOutcomeRange",
    "DegenerateWeights",
    "DgpParams",
    "DimensionMismatch",
    "EmptyArm",
    "EstimateResult",
    "FeatureCache",
    "FoldAssignment",
    "GoldUnavailable",
    "KAPPA_MODES",
    "KTooLarge",
    "LearnerSpec",
    "MismatchedLength",
    "MissingGoldStandard",
    "MissingKappa",
    "MonteCarloSummary",
    "NonConvergence",
    "NuisanceSet",
    "Observation",
    "Predictor",
    "SIMULATION_METHODS",
    "SUMMARY_COLUMNS",
    "ScenarioConfig",
    "SuperLearnerFailed",
    "TooFewRows",
    "TwoPhaseError",
    "UnvalidatedRow",
    "aipw_complete",
    "aipw_pair",
    "apply_two_phase",
    "ate_from_arms",
    "crossfit_predict",
    "ensemble",
    "expand_basis",
    "fit_cell_means",
    "fit_kappa",
    "fit_logistic_irls",
    "fit_nuisances",
    "fit_super_learner",
    "fit_wls",
    "generate_complete",
    "make_folds",
    "onestep1",
    "onestep2",
    "parse_learner",
    "plugin1",
    "plugin2",
    "read_dataset_csv",
    "run_grid",
    "run_replication",
    "summarize_records",
    "tmle2",
    "true_ate",
    "validate_dataset",
    "variance_from_ic",
    "write_dataset_csv",
    "__version__",
]
