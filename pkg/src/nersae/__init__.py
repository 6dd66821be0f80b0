"""Nested error regression models for small area estimation."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    AreaSample,
    DesignError,
    ModelParams,
    PopulationFrame,
    SampleData,
    build_design,
    build_sample,
    gamma,
)
from .fit import (  # noqa: E402
    AsymptoticCovariance,
    ConvergenceError,
    FittedModel,
    Method,
    MomentSource,
    RankDeficiencyError,
    asymptotic_covariance,
    fit,
    fit_ml,
    fit_reml,
)
from .predict import (  # noqa: E402
    FixedKind,
    Target,
    eblup_alpha,
    fit_fixed_effects,
    mse_lw,
    mse_pr,
    predict_areas,
    predict_clp,
    predict_fixed,
    predict_sam,
    predict_sam_star,
    prediction_interval,
)

__all__ = [
    "AreaSample", "AsymptoticCovariance", "ConvergenceError", "DesignError", "FittedModel",
    "FixedKind", "Method", "ModelParams", "MomentSource", "PopulationFrame", "RankDeficiencyError",
    "SampleData", "Target", "asymptotic_covariance", "build_design", "build_sample", "eblup_alpha",
    "fit", "fit_fixed_effects", "fit_ml", "fit_reml", "gamma", "mse_lw", "mse_pr", "predict_areas",
    "predict_clp", "predict_fixed", "predict_sam", "predict_sam_star", "prediction_interval",
]
