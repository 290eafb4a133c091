"""Exception hierarchy. Each family maps to a stable CLI exit code."""


class FedSpcaError(Exception):
    exit_code = 1


class ValidationError(FedSpcaError, ValueError):
    """Bad input: parameters, shapes, dimensions, files."""

    exit_code = 2


class DimensionError(ValidationError):
    pass


class NumericalError(FedSpcaError, ArithmeticError):
    """Non-finite values or a factorization that cannot be completed."""

    exit_code = 3


class SingularityError(NumericalError):
    pass


class DeflationDegeneracyError(NumericalError):
    pass


class DegenerateUpdateError(NumericalError):
    pass


class TransportError(FedSpcaError):
    """Connection-level failure between master and workers."""

    exit_code = 4


class ProtocolError(TransportError):
    """A frame or message that violates the wire schema."""


class SessionAborted(TransportError):
    """A session stopped early. ``report`` holds the partial trace."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
