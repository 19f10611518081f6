"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """A caller broke an operation's precondition."""


class FormatError(ValueError):
    """A file on disk does not match the expected layout."""


class DatasetError(ValueError):
    """A dataset manifest is missing fields or fails validation."""


class NumericalDegeneracyError(RuntimeError):
    """A geometric predicate could not be decided robustly."""


class UndefinedMetricError(RuntimeError):
    """A metric has no defined value for the given inputs."""
