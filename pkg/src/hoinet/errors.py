"""Exception taxonomy shared across the package."""


class HoinetError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(HoinetError):
    """Operand shapes incompatible with the operation's contract."""


class NumericError(HoinetError):
    """Non-finite values where finiteness is part of the contract."""


class EmptyInputError(HoinetError):
    """An operation received an empty set where at least one element is required."""


class GraphError(HoinetError):
    """Tape misuse: backward on a consumed graph, loss from a foreign graph, etc."""


class BatchTooSmallError(HoinetError):
    """Batch statistics requested over fewer than two samples."""


class ConfigError(HoinetError):
    """Invalid configuration value."""


class VocabError(HoinetError):
    """Token id outside the vocabulary."""


class FrameSkippedError(HoinetError):
    """A frame cannot be processed (no valid objects, or fewer than required)."""


class LabelError(HoinetError):
    """Class label outside the valid range."""


class SequenceError(HoinetError):
    """Malformed token sequence (missing BOS/EOS, overlength, stray specials)."""


class FormatError(HoinetError):
    """Malformed binary blob or manifest file."""


class IoError(HoinetError):
    """A referenced file is missing or unreadable."""


class CheckpointError(HoinetError):
    """Checkpoint contents inconsistent with the requesting model."""
