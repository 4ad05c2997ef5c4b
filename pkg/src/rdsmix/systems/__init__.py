"""Time-one maps of the example systems and hypothesis checkers."""

from .base import (
    TimeOneMap,
    absorbing_set_estimate,
    central_difference,
    determining_defect,
    free_contraction_factor,
    write_trajectory_csv,
)
from .chain import ChainMap, OscillatorChainSpec
from .toy import LinearMap, ScalarNonlinearMap

__all__ = [
    "ChainMap",
    "LinearMap",
    "OscillatorChainSpec",
    "ScalarNonlinearMap",
    "TimeOneMap",
    "absorbing_set_estimate",
    "central_difference",
    "determining_defect",
    "free_contraction_factor",
    "write_trajectory_csv",
]

from .cgl import CGLKickMap, CGLSpectralSpec  # noqa: E402

__all__ += ["CGLKickMap", "CGLSpectralSpec"]
