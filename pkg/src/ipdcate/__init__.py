"""Doubly robust estimation of linear treatment-effect-model coefficients
from pooled multi-study individual-participant data, with a Monte Carlo
harness for the estimators' double-robustness and coverage behavior.
"""

from .data_model import (
    AdjustmentSet,
    AvailabilityMatrix,
    CovariateSchema,
    DataValidationError,
    ModifierDesign,
    PooledDataset,
    PositivityFlag,
    build_adjustment_set,
    build_modifier_design,
    coprescription_table,
    derive_availability,
    design_matrix,
    from_frame,
    positivity_report,
    read_dataset,
)
from .estimators import MsmEstimate, aiptw, eif_values, plugin, tmle
from .glm import GlmFit, RankDeficientError, fit_logistic, fit_logistic_with_fallback, fit_ols, predict
from .inference import (
    PooledEstimate,
    VarianceEstimate,
    bh_adjust,
    normal_pvalues,
    rubin_combine,
    sandwich_clustered,
    sandwich_iid,
    wald_ci,
)
from .nuisance import (
    EstimationError,
    NuisanceFits,
    bound_outcome,
    fit_nuisances,
    fit_outcome,
    fit_propensity,
)
from .simulation import (
    CellResult,
    DgpConstants,
    McReport,
    ScenarioConfig,
    TruthSpec,
    build_grid,
    generate_dataset,
    oracle_truth,
    run_cell,
    run_scenarios,
    summarize_cell,
    true_parameters,
)

__version__ = "0.1.0"
