"""Experiment orchestration and the command-line interface."""

from .config import ExperimentConfig, default_config, load_config, parse_config
from .experiments import run_moment_scan, run_weak_error, validate_config
from .functionals import Functional, make_functional
from .rates import RateFit, fit_rate

__all__ = [
    "ExperimentConfig",
    "Functional",
    "RateFit",
    "default_config",
    "fit_rate",
    "load_config",
    "make_functional",
    "parse_config",
    "run_moment_scan",
    "run_weak_error",
    "validate_config",
]
