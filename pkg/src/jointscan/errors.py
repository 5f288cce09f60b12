"""Exception types shared across the pipeline."""


class JointscanError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(JointscanError):
    """A manifest or config file does not parse under the documented format."""


class ValidationError(JointscanError):
    """Parsed data violates an invariant (missing landmark, bad label, ...)."""


class ConfigurationError(JointscanError):
    """A configuration value or combination is unusable."""


class CheckpointError(JointscanError):
    """A checkpoint does not match the expected architecture or is corrupt."""


class NumericalError(JointscanError):
    """Non-finite values surfaced during training or loss evaluation."""


class UndefinedLossError(JointscanError):
    """The loss is undefined for the given batch (no labeled entries)."""
