"""Exception types shared across the package.

The CLI maps these onto stable exit codes: DataError -> 1, ConfigError -> 2,
NumericError -> 3.
"""


class AnomcastError(Exception):
    """Base class for all package errors."""


class ShapeError(AnomcastError, ValueError):
    """Tensor/array dimensions do not satisfy an operation's contract."""


class DomainError(AnomcastError, ValueError):
    """A value is outside an operation's numeric domain (NaN, Inf, log of <= 0)."""


class ContractError(AnomcastError, RuntimeError):
    """An API was called in a way its contract forbids (misuse, not bad data)."""


class DataError(AnomcastError):
    """Input data cannot be ingested or windowed as requested."""


class ConfigError(AnomcastError):
    """A configuration file or option is invalid."""


class NumericError(AnomcastError):
    """A numeric computation failed (divergence, failed gradient check)."""


class TrainingDivergedError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, step: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
