"""Configuration, random streams, experiment drivers and the command line."""

from .config import ExperimentConfig
from .experiments import (
    ExperimentResult,
    run_controllability,
    run_couple,
    run_experiment,
    run_kernel_converge,
    run_mix_rate,
    run_verify_hypotheses,
)

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "run_controllability",
    "run_couple",
    "run_experiment",
    "run_kernel_converge",
    "run_mix_rate",
    "run_verify_hypotheses",
]
