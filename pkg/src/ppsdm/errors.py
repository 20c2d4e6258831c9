"""Exception hierarchy. Each family maps onto one CLI exit code."""


class PpsdmError(Exception):
    exit_code = 5


class ConfigError(PpsdmError):
    exit_code = 2


class DataError(PpsdmError):
    """Input data failed to parse or validate."""

    exit_code = 3


class GridParseError(DataError):
    pass


class GridValidationError(DataError):
    pass


class ModelDomainError(PpsdmError):
    """A model was evaluated outside its domain (overflow, positivity, ...)."""

    exit_code = 3


class ConvergenceError(PpsdmError):
    exit_code = 4


class SingularMatrixError(PpsdmError):
    exit_code = 4
