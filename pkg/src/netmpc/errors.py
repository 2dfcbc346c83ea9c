"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class ContractError(ValueError):
    """An input violates a documented precondition (shape, sign, bounds)."""


class IrreducibilityError(ContractError):
    """A Perron vector was requested for a reducible matrix."""


class ConfigError(ContractError):
    """A scenario/config file is malformed or carries unknown or invalid fields."""


class NumericalFailure(ArithmeticError):
    """A numerical routine could not deliver a trustworthy result."""


class SpectralConvergenceError(NumericalFailure):
    pass


class StepSizeError(NumericalFailure):
    """An RK4 step broke positivity or susceptible monotonicity."""


class CalibrationError(NumericalFailure):
    pass


class InfeasibleError(RuntimeError):
    """No admissible control satisfies the spectral/terminal constraints.

    ``best_effort`` carries the control the caller may apply instead.
    """

    def __init__(self, message, best_effort=None):
        super().__init__(message)
        self.best_effort = best_effort


class ColdStartInfeasibleError(InfeasibleError):
    pass
