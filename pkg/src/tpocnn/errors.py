"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and validation problems
exit 2, numerical failures during training exit 3.
"""


class TpoError(Exception):
    pass


class FormatError(TpoError, ValueError):
    """A file does not match its declared binary or text format."""


class LengthError(TpoError, ValueError):
    """A file payload is shorter or longer than its header promises."""


class DataError(TpoError, ValueError):
    """Payload values violate data invariants (NaN/Inf, bad label ids)."""


class ShapeError(TpoError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class SplitError(TpoError, ValueError):
    """A train/test split cannot be constructed as requested."""


class ContractError(TpoError, ValueError):
    """A call violates an operation contract (non-scalar loss, bad one-hot)."""


class MetricError(TpoError, ValueError):
    """A metric is undefined for the given confusion matrix."""


class ConfigError(TpoError, ValueError):
    """A run configuration is invalid or references missing files."""


class TrainingAbort(TpoError, RuntimeError):
    """Training hit a non-finite loss; carries the last good parameter state."""

    def __init__(self, message, last_good_state=None, step=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.step = step
