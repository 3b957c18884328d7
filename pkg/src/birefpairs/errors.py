"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: configuration 2, numeric 3, physics 4.
"""


class BirefPairsError(Exception):
    exit_code = 1


class ConfigurationError(BirefPairsError, ValueError):
    """Invalid geometry, config file, or run parameters."""

    exit_code = 2


class DomainError(BirefPairsError, ValueError):
    """Argument outside a model's validity domain."""

    exit_code = 2


class RangeError(BirefPairsError, ValueError):
    """Query outside a sampled table's range."""

    exit_code = 3


class NumericError(BirefPairsError, ArithmeticError):
    """Numerical failure (eigensolver non-convergence, zero field, ...)."""

    exit_code = 3

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class PhysicsError(BirefPairsError):
    """No guided mode, no phase matching where one is required, ..."""

    exit_code = 4
