"""Exception hierarchy shared by every module."""


class PilqrError(Exception):
    """Base class for all library errors."""


class ConfigurationError(PilqrError, ValueError):
    """Inconsistent dimensions, invalid parameters or malformed config."""


class NumericalError(PilqrError, ArithmeticError):
    """A factorization or evaluation failed; ``timestep`` is set when known."""

    def __init__(self, message, timestep=None):
        if timestep is not None:
            message = f"{message} (timestep {timestep})"
        super().__init__(message)
        self.timestep = timestep


class RolloutDivergenceError(NumericalError):
    """The environment produced a non-finite state."""


class SingularityError(NumericalError):
    """A regression design or covariance matrix is singular."""


class ConstraintInfeasibleError(NumericalError):
    """No dual variable in the search bracket yields a valid policy."""
