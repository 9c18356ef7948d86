"""Exception hierarchy. Each top-level class maps to one CLI exit code."""


class TwinEmbedError(Exception):
    exit_code = 1


class ConfigError(TwinEmbedError, ValueError):
    exit_code = 2


class DataError(TwinEmbedError, ValueError):
    exit_code = 3


class NumericError(TwinEmbedError, ArithmeticError):
    exit_code = 4


class ArtifactIOError(TwinEmbedError, OSError):
    exit_code = 5


class ShapeError(NumericError):
    pass


class DomainError(NumericError):
    pass


class DegenerateInputError(NumericError):
    pass


class ContractError(NumericError):
    pass


class MetricError(NumericError):
    pass
