"""Exception types shared across the library."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(ValueError):
    """A configuration object violates one of its invariants."""


class CapacityError(ValueError):
    """An enumeration would exceed the caller-supplied cap."""


class NumericalError(RuntimeError):
    """A quadrature or solver failed to reach its target accuracy.

    Carries the achieved error estimate when one is available.
    """

    def __init__(self, message, achieved_error=None):
        super().__init__(message)
        self.achieved_error = achieved_error
