"""Spectral-Galerkin laboratory for slow-fast stochastic reaction-diffusion equations.

Simulates the fully coupled slow-fast system, builds the homogenized limit
equation (averaged drift and diffusion, Poisson-corrector drift and the
emergent diffusion), and measures the weak convergence rate between them.
"""

from .errors import (
    CenteringError,
    ConfigurationError,
    DiffApproxError,
    DomainError,
    EvaluationError,
    IntegrationBlowUp,
    ParseError,
    PSDError,
)
from .functions import CoefficientSet, ScalarFn, parse_expr
from .noise import NoiseSpec, RngStream
from .spectral import GridField, OperatorSpec, SpectralField

__version__ = "0.1.0"

__all__ = [
    "CenteringError",
    "CoefficientSet",
    "ConfigurationError",
    "DiffApproxError",
    "DomainError",
    "EvaluationError",
    "GridField",
    "IntegrationBlowUp",
    "NoiseSpec",
    "OperatorSpec",
    "ParseError",
    "PSDError",
    "RngStream",
    "ScalarFn",
    "SpectralField",
    "parse_expr",
]
