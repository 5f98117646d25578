"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array has the wrong rank, width, or contains non-finite values."""


class LabelError(ValueError):
    """Class labels are out of range, non-dense, or a class is empty."""


class CacheError(ValueError):
    """A backward pass was fed a cache from a different forward pass."""


class PlanError(ValueError):
    """A fine-tune or regularization plan violates its invariants."""


class ConfigError(ValueError):
    """A config file, flag set, or measures document is invalid."""


class FormatError(ValueError):
    """A serialized artifact (checkpoint, CSV, records file) is malformed.

    ``offset`` is a byte offset for binary formats, ``line`` a 1-based line
    number for text formats; either may be None when not applicable.
    """

    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        self.offset = offset
        self.line = line
        where = ""
        if offset is not None:
            where = f" (at byte offset {offset})"
        elif line is not None:
            where = f" (at line {line})"
        super().__init__(message + where)


class VersionError(FormatError):
    """A serialized artifact declares an unsupported format version."""


class ConditioningError(ValueError):
    """A matrix that must be inverted is singular or nearly so."""

    def __init__(self, message: str, smallest_eigenvalue: float):
        self.smallest_eigenvalue = smallest_eigenvalue
        super().__init__(f"{message} (smallest eigenvalue {smallest_eigenvalue:.3e})")


class DivergenceError(RuntimeError):
    """Training produced a non-finite or runaway loss."""

    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")
