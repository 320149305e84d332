"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Bad dimensions, out-of-range hyperparameters, unknown names."""


class NumericOverflowError(ArithmeticError):
    """A state or iterate stopped being finite (or crossed the divergence limit)."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class SteadyStateUndefinedError(ArithmeticError):
    """The closed loop has no unique steady state (spectral radius >= 1)."""


class OracleUnavailableError(RuntimeError):
    """No exact steady-state map exists for the scenario."""


class AssumptionViolation(ConfigurationError):
    """Theory constants violate a standing assumption (e.g. mu >= 1)."""
