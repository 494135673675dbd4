"""
Error hierarchy for BMLP.

Every error subclasses BMLPError plus the closest builtin, so callers may
catch either ``BMLPError`` or e.g. ``ValueError``.
"""


class BMLPError(Exception):
    """Base class for all BMLP errors."""


class DimensionError(BMLPError, ValueError):
    """Tensor shapes do not agree."""


class InvalidMaskError(BMLPError, ValueError):
    """A mask leaves nothing to normalise over."""


class ConfigurationError(BMLPError, ValueError):
    """Hyperparameters or run configuration are inconsistent."""


class CorruptDataError(BMLPError, ValueError):
    """An index or record is outside the range its table allows."""


class MalformedInputError(BMLPError, ValueError):
    """Too many malformed lines in a raw interaction log."""


class EmptyDatasetError(BMLPError, ValueError):
    """A pipeline stage produced no data."""


class NonFiniteError(BMLPError, FloatingPointError):
    """A loss or gradient became NaN/inf."""


class MissingCacheError(BMLPError, RuntimeError):
    """Backward called without the activations of a forward pass."""


class UndefinedMetricError(BMLPError, ValueError):
    """A metric was requested over zero samples."""


class InvalidTargetError(BMLPError, ValueError):
    """A ranking target is excluded from the candidate set."""


class CheckpointError(BMLPError, RuntimeError):
    """Base class for checkpoint I/O problems."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint header, body or checksum is damaged or truncated."""


class HyperParamMismatchError(CheckpointError):
    """Checkpoint architecture differs from the requested run."""


class StageError(BMLPError, RuntimeError):
    """A CLI pipeline stage failed; wraps the underlying error."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
