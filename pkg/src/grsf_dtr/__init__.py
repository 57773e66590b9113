"""Generalized random survival forests for indefinite-horizon dynamic
treatment regimes: curve primitives, forest fitting, strata-aware backward
recursion, a trajectory simulator, and policy value estimation."""

from .curves import (
    CurveError,
    Horizon,
    OutcomeCurve,
    OutcomeKind,
    StepSurvivalCurve,
    modified_km,
    psi_residual,
    restricted_mean,
    shift_augment,
)
from .engine import (
    DtrEstimate,
    EngineError,
    FeatureRegistry,
    StrataPlan,
    Trajectory,
    VisitRecord,
    apply_policy,
    assign_strata,
    backward_sweep,
    choose_cutpoint,
    fit_dtr,
    pool_stratum,
)
from .evaluation import (
    EvalReport,
    cross_validate,
    fit_censoring,
    fit_propensity,
    ipcw_value,
    mc_value,
)
from .forest import (
    ForestFitError,
    ForestHyperparams,
    ForestModel,
    fit_forest,
    grow_tree,
    logrank_split_score,
)
from .simlab import (
    PRESETS,
    SimConfig,
    SimDataset,
    preset_config,
    propensity,
    simulate_cohort,
    simulate_under_policy,
    transition_state,
)

__version__ = "0.1.0"

__all__ = [
    "CurveError", "Horizon", "OutcomeCurve", "OutcomeKind", "StepSurvivalCurve",
    "modified_km", "psi_residual", "restricted_mean", "shift_augment",
    "DtrEstimate", "EngineError", "FeatureRegistry", "StrataPlan", "Trajectory",
    "VisitRecord", "apply_policy", "assign_strata", "backward_sweep",
    "choose_cutpoint", "fit_dtr", "pool_stratum",
    "EvalReport", "cross_validate", "fit_censoring", "fit_propensity",
    "ipcw_value", "mc_value",
    "ForestFitError", "ForestHyperparams", "ForestModel", "fit_forest",
    "grow_tree", "logrank_split_score",
    "PRESETS", "SimConfig", "SimDataset", "preset_config", "propensity",
    "simulate_cohort", "simulate_under_policy", "transition_state",
]
