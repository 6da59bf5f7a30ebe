"""Exception types shared across the toolkit."""


class NUNetError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(NUNetError):
    """Invalid architecture, training, or CLI configuration."""


class ShapeError(NUNetError):
    """Array shape violates a contract (divisibility, matching sizes)."""


class DataError(NUNetError):
    """Dataset ingestion or preprocessing failure."""


class TrainingError(NUNetError):
    """Training aborted (for example, the loss became non-finite)."""
