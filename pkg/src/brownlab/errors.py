"""Exception types shared across the package."""


class BrownlabError(Exception):
    """Base class for all errors raised by brownlab."""


class StepBudgetExceeded(BrownlabError):
    """A sampled walk did not reach its stopping set within the step cap."""


class GeometryError(BrownlabError):
    """Input geometry does not fit the requested grid."""


class SwallowedPointError(BrownlabError):
    """A probe point landed on an occupied cell; the caller decides policy."""


class ConvergenceError(BrownlabError):
    """Relaxation solver hit its iteration cap before meeting tolerance."""

    def __init__(self, message, residual=None, sweeps=None):
        super().__init__(message)
        self.residual = residual
        self.sweeps = sweeps


class MalformedDomainError(BrownlabError):
    """A conditioned walk has no positive-probability step from its start."""


class NotInGammaError(BrownlabError):
    """A path pair does not define a valid configuration (no unique access
    domain from the origin to the unit circle)."""


class EnsembleExtinctError(BrownlabError):
    """Every particle weight vanished during power iteration."""


class EstimateError(BrownlabError):
    """An estimator received data it cannot fit (e.g. a zero mean)."""
