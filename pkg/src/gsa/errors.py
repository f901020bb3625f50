"""Exception hierarchy shared by every module."""


class GSAError(Exception):
    """Base class; ``exit_code`` is what the CLI returns."""

    exit_code = 1


class DimensionError(GSAError, ValueError):
    exit_code = 3


class ArgumentError(GSAError, ValueError):
    exit_code = 2


class ConfigError(GSAError):
    exit_code = 2


class DataError(GSAError):
    exit_code = 3


class NumericError(GSAError, FloatingPointError):
    exit_code = 4


class EvaluationError(NumericError):
    """A function under test returned a non-finite value."""


class TrainingError(GSAError):
    exit_code = 4


class StructuralError(GSAError):
    """Model graph and pruning plan disagree."""

    exit_code = 3
