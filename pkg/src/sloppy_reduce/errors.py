"""Exception hierarchy shared by every module."""


class SloppyReduceError(Exception):
    """Base class for all library errors."""


class ConfigError(SloppyReduceError):
    """Invalid model, parameter or run configuration."""


class DomainError(SloppyReduceError, ValueError):
    """A parameter value lies outside the domain of a transform."""


class ShapeError(SloppyReduceError, ValueError):
    """Array dimensions do not line up."""


class OptimizationError(SloppyReduceError):
    """No optimizer start converged."""


class SamplerError(SloppyReduceError):
    """The SMC sampler degenerated."""


class StateError(SloppyReduceError):
    """An object was used before reaching the required state."""


class StencilError(SloppyReduceError):
    """A finite-difference stencil point evaluated to a non-finite value."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class SpectrumError(SloppyReduceError):
    """The leading eigenvalue of a sensitivity matrix is not positive."""

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class PriorCovError(SloppyReduceError):
    """The prior covariance in log space is not positive definite."""
