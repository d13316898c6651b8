"""Zvonkin regularisation of SDEs with singular drift.

Pipeline: truncate coefficients, solve the drifted resolvent equation, build
the map ``x + u(x)``, simulate the transformed SDE, then estimate moments,
Krylov/Khasminskii bounds and two-point quantities from path ensembles.
"""

from .analysis import Grid, GridFunction
from .coefficients import (PRESETS, AssumptionParams, CoefficientField, TruncatedField, audit_assumptions,
                           make_preset, truncate)
from .errors import (AssumptionViolation, ConfigError, ConvergenceError, DegenerateEstimateError,
                     ParameterError, RegularityError, ResolutionError, SolverError, StabilityError,
                     ZvonkinError)
from .estimators import ESTIMATORS, BoundReport, MonteCarloEstimate
from .kernels import BACKEND
from .pde_resolvent import KrylovConstants, ResolventConfig, lambda_R, lambda_R_H, picard_solve_drifted
from .simulator import PathBatch, SimConfig, TwoPointBatch, patch_global, simulate_transformed, two_point
from .zvonkin import Pipeline, PipelineSpec, ZvonkinMap, build_map, build_pipeline

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ESTIMATORS", "PRESETS", "AssumptionParams", "AssumptionViolation", "BoundReport",
    "CoefficientField", "ConfigError", "ConvergenceError", "DegenerateEstimateError", "Grid", "GridFunction",
    "KrylovConstants", "MonteCarloEstimate", "ParameterError", "PathBatch", "Pipeline", "PipelineSpec",
    "RegularityError", "ResolutionError", "ResolventConfig", "SimConfig", "SolverError", "StabilityError",
    "TruncatedField", "TwoPointBatch", "ZvonkinError", "ZvonkinMap", "audit_assumptions", "build_map",
    "build_pipeline", "lambda_R", "lambda_R_H", "make_preset", "patch_global", "picard_solve_drifted",
    "simulate_transformed", "truncate", "two_point",
]
