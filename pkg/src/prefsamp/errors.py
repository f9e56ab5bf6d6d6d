"""Exception hierarchy shared across the package.

The CLI maps each family to an exit code: config 2, data 3, numerical 4.
"""


class PrefsampError(Exception):
    exit_code = 1


class ConfigError(PrefsampError):
    exit_code = 2


class DataError(PrefsampError):
    exit_code = 3


class SchemaError(DataError):
    pass


class NumericalError(PrefsampError):
    exit_code = 4


class NotPositiveDefiniteError(NumericalError):
    pass


class VariogramFitError(NumericalError):
    def __init__(self, message, best_residual=float("nan")):
        super().__init__(message)
        self.best_residual = best_residual


class FitError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []
