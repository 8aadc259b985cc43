"""Exception hierarchy shared across the package."""


class FedRotError(Exception):
    """Base class for all package errors."""


class UsageError(FedRotError):
    """Caller violated a precondition (bad shapes, bad arguments)."""


class NumericError(FedRotError):
    """A numerical routine failed (non-convergence, rank deficiency)."""


class DegenerateInputError(FedRotError):
    """Input is degenerate for the requested diagnostic (e.g. zero-norm factor)."""


class ProtocolError(FedRotError):
    """Federation protocol violation (e.g. report count mismatch)."""


class PartitionError(FedRotError):
    """No admissible non-empty client assignment exists."""


class EstimationError(FedRotError):
    """A theory-constant estimate is undefined for the given trajectory."""


class ConfigError(FedRotError):
    """Experiment file is malformed or fails validation.

    ``line`` / ``column`` are populated when the underlying parser
    reported a location.
    """

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class DivergenceError(FedRotError):
    """Training diverged.  Carries the location and any partial trajectory."""

    def __init__(self, message, round_index=None, step_index=None, partial=None):
        super().__init__(message)
        self.round_index = round_index
        self.step_index = step_index
        self.partial = partial
