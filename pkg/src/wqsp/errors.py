"""Exception hierarchy shared across the package."""


class WqspError(Exception):
    """Base class for all package errors."""


class NetworkError(WqspError, ValueError):
    """Problem in a network document or model.

    ``line`` is the 1-based line number in the source text when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingSection(NetworkError):
    pass


class DuplicateId(NetworkError):
    pass


class DanglingEndpoint(NetworkError):
    def __init__(self, node_id, line=None):
        self.node_id = node_id
        super().__init__(f"link endpoint {node_id!r} is not a declared node", line)


class MalformedRow(NetworkError):
    pass


class HydraulicsError(WqspError, ValueError):
    pass


class UnknownLinkId(HydraulicsError):
    pass


class NonfiniteValue(HydraulicsError):
    pass


class StepCountMismatch(HydraulicsError):
    pass


class EmptyPattern(HydraulicsError):
    pass


class UnstableRequest(HydraulicsError):
    pass


class DynamicsError(WqspError, ValueError):
    pass


class BetaOutOfRange(DynamicsError):
    pass


class ZeroTankVolume(DynamicsError):
    pass


class NegativeMixingDenominator(DynamicsError):
    pass


class DimensionMismatch(DynamicsError):
    pass


class NonFiniteLogDet(WqspError, ArithmeticError):
    pass


class TooLargeForDense(WqspError, ValueError):
    pass


class TooLarge(WqspError, ValueError):
    pass


class EmptyCandidates(WqspError, ValueError):
    pass


class ShapeMismatch(WqspError, ValueError):
    pass


class SingularInnovation(WqspError, ArithmeticError):
    pass


class ConfigError(WqspError, ValueError):
    """Invalid run configuration (CLI exit code 2)."""
