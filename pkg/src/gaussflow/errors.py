"""Exception types raised across the package."""


class GaussFlowError(Exception):
    """Base class for all package errors."""

    kind = "error"


class SqrtDomainError(GaussFlowError, ValueError):
    """Matrix has no principal square root (non-positive spectrum) or the
    recurrence failed to reproduce it."""

    kind = "sqrt-domain"


class SylvesterSingularError(GaussFlowError, ValueError):
    """The spectra of A and -B intersect, so A X + X B = C is singular."""

    kind = "sylvester-singular"


class CovarianceError(GaussFlowError, ValueError):
    """A covariance matrix is not symmetric positive definite."""

    kind = "covariance"


class DomainError(GaussFlowError, ValueError):
    """A model function was evaluated outside its domain."""

    kind = "domain"


class StepRejected(GaussFlowError):
    """A flow step left the region where its map is invertible."""

    kind = "step-rejected"


class DegenerateWeightsError(GaussFlowError):
    """Every particle carries zero weight."""

    kind = "degenerate-weights"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(GaussFlowError, ValueError):
    """Invalid run configuration."""

    kind = "config"
