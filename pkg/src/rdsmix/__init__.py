"""Coupling and mixing numerics for random dynamical systems with bounded non-Markovian noise."""

from .errors import (
    ConfigError,
    DomainError,
    FitError,
    InfeasibleError,
    IntegratorBlowup,
    ParameterError,
    SamplerError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "FitError",
    "InfeasibleError",
    "IntegratorBlowup",
    "ParameterError",
    "SamplerError",
    "ShapeError",
]
