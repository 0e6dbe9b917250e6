"""Regression on respondent-driven sampling data: simulation, weighting, fitting, bootstrap."""

from .bootstrap import (BootstrapConfig, BootstrapResult, bootstrap_fit, neighborhood_resample, percentile_ci,
                        tree_resample)
from .dgp import CovariateSpec, DgpParams, GenerationError, PreconditionError, gen_covariate, gen_outcomes
from .ergm import CalibrationError, ErgmConfig, generate_population
from .glmm import (FitResult, ModelSpec, RandomInterceptRegressor, SeparationError, fit_glmm, fit_lmm,
                   fit_model, wald_ci)
from .metrics import coverage, mann_whitney_u, metric_relative_bias, rmse, variance_relative_bias
from .network import ClusterGraph, ConvergenceError, PopulationNetwork, read_edge_list, spectral_radius, write_edge_list
from .sampling import RdsConfig, RecruitmentTree, read_tree, run_rds, write_tree
from .study import SimReport, StudyConfig, read_report, run_study, write_report
from .weights import DesignWeights, WeightScheme, apply_scheme, rds2_weights, ss_weights

__version__ = "0.1.0"

__all__ = [
    "BootstrapConfig", "BootstrapResult", "CalibrationError", "ClusterGraph", "ConvergenceError", "CovariateSpec",
    "DesignWeights", "DgpParams", "ErgmConfig", "FitResult", "GenerationError", "ModelSpec", "PopulationNetwork",
    "PreconditionError", "RandomInterceptRegressor", "RdsConfig", "RecruitmentTree", "SeparationError",
    "SimReport", "StudyConfig", "WeightScheme", "apply_scheme", "bootstrap_fit", "coverage", "fit_glmm",
    "fit_lmm", "fit_model", "gen_covariate", "gen_outcomes", "generate_population", "mann_whitney_u",
    "metric_relative_bias", "neighborhood_resample", "percentile_ci", "rds2_weights", "read_edge_list",
    "read_report", "read_tree", "rmse", "run_rds", "run_study", "spectral_radius", "ss_weights", "tree_resample",
    "variance_relative_bias", "wald_ci", "write_edge_list", "write_report", "write_tree",
]
