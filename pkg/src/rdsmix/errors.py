"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array shapes or dimensions do not match."""


class DomainError(ValueError):
    """A value lies outside the admissible set (e.g. the noise support box)."""


class ParameterError(ValueError):
    """A numerical parameter is out of range."""


class SamplerError(RuntimeError):
    """A rejection sampler exhausted its attempt budget."""


class InfeasibleError(RuntimeError):
    """No candidate on a search grid satisfies the requested tolerance."""


class IntegratorBlowup(FloatingPointError):
    """A time integrator produced non-finite values."""


class FitError(ValueError):
    """Too few usable points for a regression."""


class ConfigError(ValueError):
    """An experiment configuration is invalid or incomplete."""
