"""Separable space-time Gaussian model: priors, MAP fitting, kriging and validation."""
from .compare import compare_structures
from .design import SpaceTimeData, Structure, Temporal, TrendKind
from .fit import OptimizerConfig, SpaceTimeModel, fit_map
from .predict import PredictionSurface, predict, predict_points
from .priors import PcPriorSpec, pc_prec_logdensity, pc_prior_logdensity_matern, rw_penalty
from .trend import TrendRegression, fit_trend_regression
from .validate import HoldoutReport, validate_holdout

__all__ = [
    "compare_structures", "SpaceTimeData", "Structure", "Temporal", "TrendKind",
    "OptimizerConfig", "SpaceTimeModel", "fit_map", "PredictionSurface", "predict",
    "predict_points", "PcPriorSpec", "pc_prec_logdensity", "pc_prior_logdensity_matern",
    "rw_penalty", "TrendRegression", "fit_trend_regression", "HoldoutReport", "validate_holdout",
]
