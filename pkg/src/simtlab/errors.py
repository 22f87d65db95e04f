"""Exception types shared across the package."""


class SimtError(Exception):
    """Base class for errors raised by simtlab."""


class ContractViolation(SimtError, ValueError):
    """A caller broke an operation's precondition (shapes, ranges, lengths)."""


class NumericError(SimtError, ArithmeticError):
    """A computation produced a non-finite or otherwise invalid number."""


class ConfigError(SimtError):
    """Invalid or unknown configuration values."""


class IngestionError(SimtError):
    """Malformed corpus, vocabulary or alignment input."""


class CheckpointError(SimtError):
    """Checkpoint could not be written, read or matched to a model."""


class IntegrityError(CheckpointError):
    """Checkpoint blobs do not match the digest stored in the manifest."""


class OracleError(SimtError):
    """A verification oracle could not produce a trustworthy value."""
