"""Shared exception types."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class TransportError(ConnectionError):
    """A remote predictor endpoint could not be reached. Retryable."""


class StartupError(OSError):
    """The prediction service could not bind its endpoint."""
