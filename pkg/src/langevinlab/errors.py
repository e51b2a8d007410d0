"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: UsageError -> 2, NumericError -> 3,
IngestionError (and plain OSError) -> 4.
"""


class LangevinLabError(Exception):
    """Base class for all package errors."""


class UsageError(LangevinLabError):
    """Caller violated a precondition (bad dimension, missing parameter, ...)."""


class ConfigError(UsageError):
    """Config file failed schema validation; message carries the field path."""


class NumericError(LangevinLabError):
    """A numeric computation failed (overflow, singularity, non-finite value)."""


class DivergenceError(NumericError):
    """A sampler chain left the admissible region."""

    def __init__(self, message, step=None, eta=None, last_state=None):
        super().__init__(message)
        self.step = step
        self.eta = eta
        self.last_state = last_state


class SingularMetricError(NumericError):
    """A position-dependent metric was evaluated at a singular point."""


class SolverError(NumericError):
    """Linear solver failed or the system is too ill-conditioned to trust."""


class CompatibilityError(NumericError):
    """Poisson right-hand side violates the solvability condition."""


class DomainError(NumericError):
    """Grid box too small for the requested measure; carries suggested bounds."""

    def __init__(self, message, suggested_bounds=None):
        super().__init__(message)
        self.suggested_bounds = suggested_bounds


class IngestionError(LangevinLabError):
    """Input file malformed; message names the offending row when known."""
