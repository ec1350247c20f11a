"""Exception types shared across the package.

The CLI maps these onto exit codes: parameter and domain problems are
validation failures (2), solver and applicability problems are solver
failures (3).
"""


class InsiderValError(Exception):
    """Base class for library errors."""


class InvalidParameterError(InsiderValError, ValueError):
    """A model, utility or problem parameter is outside its admissible range."""


class DomainError(InsiderValError, ValueError):
    """An evaluator was called outside the domain where it is defined."""


class SolverError(InsiderValError, RuntimeError):
    """A root finder or multiplier solver failed to converge or bracket."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InapplicableError(InsiderValError, RuntimeError):
    """A method's preconditions do not hold for the given model."""


class ConsistencyError(InsiderValError, RuntimeError):
    """A Monte Carlo estimate contradicts a structural bound."""
