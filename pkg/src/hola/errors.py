"""Exception and warning types shared across the package."""


class HolaError(Exception):
    """Base class for package errors."""


class InvalidParameterError(HolaError, ValueError):
    pass


class UnsupportedOperationError(HolaError):
    pass


class NotPSDError(HolaError, ValueError):
    """A covariance that should be positive semidefinite is not."""


class InsufficientDataError(HolaError, ValueError):
    pass


class DivergenceError(HolaError, FloatingPointError):
    """A chain produced non-finite values.

    ``partial`` optionally carries whatever the chain had produced before the
    failure so callers can still report it.
    """

    def __init__(self, message, step=None, node=None, chain=None, partial=None):
        super().__init__(message)
        self.step = step
        self.node = node
        self.chain = chain
        self.partial = partial


class ContractionWarning(UserWarning):
    """Step size too large for the Picard map to be a guaranteed contraction."""
