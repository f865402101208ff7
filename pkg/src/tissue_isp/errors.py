"""Exception hierarchy shared across the package."""


class IspError(Exception):
    """Base class for all package errors."""


class ParameterError(IspError, ValueError):
    pass


class OutOfDomainError(IspError, ValueError):
    pass


class ConfigError(IspError, ValueError):
    """Invalid or inconsistent configuration."""


class SimulationDiverged(IspError, RuntimeError):
    """Raised when the FEM solution becomes non-finite.

    ``last_state`` holds the most recent finite state.
    """

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class ResetFailure(IspError, RuntimeError):
    """Episode sampling exhausted its resampling budget."""


class DegenerateEpisode(IspError, ValueError):
    pass


class ShapeError(IspError, ValueError):
    pass


class NumericalError(IspError, ArithmeticError):
    pass
