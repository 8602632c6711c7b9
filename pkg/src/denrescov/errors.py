"""Exception hierarchy. Each family maps to a CLI exit code."""


class DenResCovError(Exception):
    exit_code = 1


class ConfigError(DenResCovError, ValueError):
    exit_code = 2


class ShapeError(DenResCovError, ValueError):
    exit_code = 2


class InputError(DenResCovError, ValueError):
    exit_code = 3


class DataError(DenResCovError):
    exit_code = 3


class CompositionError(DataError):
    """Raised when a source cohort cannot supply a recipe's class count."""


class LoadError(DataError):
    """Raised when a weight archive does not match a model."""


class NumericError(DenResCovError, ArithmeticError):
    exit_code = 4
