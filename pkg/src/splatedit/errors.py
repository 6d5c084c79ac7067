"""Exception hierarchy.

Every error carries the process exit code the CLI reports for it.
"""


class SplatEditError(Exception):
    exit_code = 1


class ConfigError(SplatEditError, ValueError):
    """Bad configuration value, missing referenced file, invalid argument."""

    exit_code = 2


class DataError(SplatEditError, ValueError):
    """Malformed or inconsistent data: shapes, file contents, invariants."""

    exit_code = 3


class NumericalError(SplatEditError, ArithmeticError):
    """Non-finite values, inconsistent schedules, divergent optimisation."""

    exit_code = 4


class DivergenceError(NumericalError):
    def __init__(self, message, losses=None):
        super().__init__(message)
        self.losses = list(losses or [])
