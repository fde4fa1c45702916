"""
Exception hierarchy shared by every interlace module.
"""


class InterlaceError(Exception):
    """Base class for all library errors."""


class IngestError(InterlaceError):
    """Malformed interaction data."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class SplitError(InterlaceError):
    """Invalid split configuration or an empty split range."""


class ShapeError(InterlaceError, ValueError):
    """Array shapes do not match the operation's contract."""


class ConfigError(InterlaceError):
    """Invalid or unresolvable configuration."""


class NonFiniteError(InterlaceError):
    """
    A loss or gradient stopped being finite.

    Attributes:
        epoch: Epoch index (1-based) or None
        batch: Batch index within the plan or None
        seq_index: Offending interaction or None
    """

    def __init__(self, message, epoch=None, batch=None, seq_index=None):
        self.epoch = epoch
        self.batch = batch
        self.seq_index = seq_index
        details = ', '.join(
            f"{name}={value}"
            for name, value in (('epoch', epoch), ('batch', batch), ('interaction', seq_index))
            if value is not None
        )
        super().__init__(f"{message} ({details})" if details else message)


class EvaluationError(InterlaceError):
    """Evaluation cannot be computed on the requested range."""


class CheckpointError(InterlaceError):
    """Checkpoint file is missing or inconsistent."""


class EntityError(InterlaceError, IndexError):
    """User or item id outside the model's range."""
