"""Exception hierarchy shared by every module."""


class AGNError(Exception):
    """Base exception class for speaker-set extraction errors."""
    pass


class InvalidInputError(AGNError):
    """Raised when an argument violates a value, range or shape contract."""
    pass


class DimensionMismatchError(InvalidInputError):
    """Raised when array dimensions disagree with each other or with a config."""
    pass


class InvalidStateError(AGNError):
    """Raised when an operation runs against a stale or missing forward cache."""
    pass


class InvalidConfigError(AGNError):
    """Raised when a configuration is malformed or contradicts the requested mode."""
    pass


class TrainingDivergenceError(AGNError):
    """Raised when a loss or gradient turns NaN/Inf during training.

    Attributes:
        step: Training step at which divergence was detected
        last_checkpoint: Path of the last good checkpoint, if one was written
    """

    def __init__(self, message: str, step: int | None = None, last_checkpoint: str | None = None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint


class PersistenceError(AGNError):
    """Base exception for file format and I/O errors."""
    pass


class ChecksumError(PersistenceError):
    """Raised when a checkpoint's trailing checksum does not match its content."""
    pass


class CheckpointFormatError(PersistenceError):
    """Raised when a checkpoint has an unknown magic, version or truncated layout."""
    pass


class UnsupportedFormatError(PersistenceError):
    """Raised when an audio file is not mono 16-bit PCM WAV at a supported rate."""
    pass
