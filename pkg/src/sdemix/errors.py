"""Exception taxonomy shared across the library.

Numerical failures distinguish between "the caller fed us garbage"
(NonPsdMatrix, SingularCovariance) and "the chain wandered somewhere
invalid" (DomainViolation, StatePathInvalid). Samplers catch the latter
and treat them as zero-density proposals.
"""


class SdemixError(Exception):
    """Base class for all library errors."""


class NonPsdMatrix(SdemixError):
    """A matrix required to be positive semi-definite is not."""


class SingularCovariance(SdemixError):
    """A covariance matrix required to be invertible is singular."""


class DomainViolation(SdemixError):
    """A state lies outside the model's declared valid domain."""


class StatePathInvalid(SdemixError):
    """A simulated or reconstructed path exited the model domain."""

    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


class MissingJacobian(SdemixError):
    """Model does not supply the drift Jacobian required by the LNA."""


class OdeStepFailure(SdemixError):
    """Adaptive ODE step size underflowed (stiff or invalid parameters)."""


class ConfigError(SdemixError):
    """Run configuration is inconsistent or malformed."""


class DataError(SdemixError):
    """Input dataset is malformed or fails validation."""


class DegenerateChain(SdemixError):
    """Chain diagnostics requested on a zero-variance chain."""


class NonPositiveRate(SdemixError):
    """Effect components sum to a non-positive birth or death rate."""
