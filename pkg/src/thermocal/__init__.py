"""Bayesian calibration of temperature-dependent thermal conductivity."""

__version__ = "0.1.0"

from .adaptive import AdaptiveResult, RefinementConfig, mesh_refine, run_adaptive
from .conductivity import ConductivityModel, evaluate, refine
from .data import (Dataset, GroundTruthConductivity, default_error_model, default_ground_truth,
                   export_csv, ingest_csv, subset_steady_state, synthesize)
from .errors import CalibrationError, ConfigError, DataError, NumericalError
from .forward import (Discretization, ThermalSetup, element_bound, min_elements_for_timesteps,
                      predict_sensors, solve, solve_implicit)
from .mcmc import ChainConfig, PosteriorChain, credible_band, effective_sample_size, geweke, sample
from .model_selection import SelectionRecord, bic, complexity_justified, dic
from .optimizer import OptimizerConfig, map_estimate
from .probabilistic import (PosteriorProblem, PriorSpec, SensorErrorModel, log_likelihood, log_prior,
                            loss, morozov_threshold)

__all__ = [
    "AdaptiveResult", "CalibrationError", "ChainConfig", "ConductivityModel", "ConfigError",
    "DataError", "Dataset", "Discretization", "GroundTruthConductivity", "NumericalError",
    "OptimizerConfig", "PosteriorChain", "PosteriorProblem", "PriorSpec", "RefinementConfig",
    "SelectionRecord", "SensorErrorModel", "ThermalSetup", "bic", "complexity_justified",
    "credible_band", "default_error_model", "default_ground_truth", "dic", "effective_sample_size",
    "element_bound", "evaluate", "export_csv", "geweke", "ingest_csv", "log_likelihood", "log_prior",
    "loss", "map_estimate", "mesh_refine", "min_elements_for_timesteps", "morozov_threshold",
    "predict_sensors", "refine", "run_adaptive", "sample", "solve", "solve_implicit",
    "subset_steady_state", "synthesize",
]
