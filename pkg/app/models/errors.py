class AuditError(Exception):
    """Base class for all errors raised by the audit pipeline."""


class ConfigError(AuditError):
    """Unknown configuration key or unusable value."""


class ShapeError(AuditError):
    """Layer extents do not fit together (raised while building a network)."""


class UsageError(AuditError):
    """An operation was called with arguments it cannot work with."""


class DatasetError(AuditError):
    """A manifest or trial file could not be parsed."""


class TrainingError(AuditError):
    """Training diverged or could not run."""


class StatsError(AuditError):
    """Statistical test inputs are degenerate."""
