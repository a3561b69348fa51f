"""Exception types raised across the package.

Each class carries the CLI exit code it maps to (2 = validation,
3 = numerical failure, 4 = gate failure).
"""


class MaceError(Exception):
    exit_code = 1


class ValidationError(MaceError, ValueError):
    exit_code = 2


class DimensionMismatch(ValidationError):
    pass


class UnknownToken(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SpanOutOfRange(ValidationError, IndexError):
    pass


class TimestepOutOfRange(ValidationError):
    pass


class WeightsNotNormalized(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericalError(MaceError, ArithmeticError):
    exit_code = 3


class NotPositiveDefinite(NumericalError):
    pass


class DidNotImprove(NumericalError):
    pass


class UndefinedMean(NumericalError):
    pass


class GateFailure(MaceError):
    exit_code = 4


class DidNotConverge(GateFailure):
    pass


class ClassifierGateFailed(GateFailure):
    pass
