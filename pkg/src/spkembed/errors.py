"""Exception types shared across the toolkit."""


class SpkembedError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(SpkembedError):
    """Operands have inconsistent shapes."""


class ShortSequenceError(SpkembedError):
    """Sequence shorter than the temporal context it must cover."""


class DegenerateBatchError(SpkembedError):
    """Batch statistics requested over fewer than two rows."""


class EmptyInputError(SpkembedError):
    """An operation received an empty sequence."""


class ConfigError(SpkembedError):
    """Invalid or inconsistent configuration."""


class DivergenceError(SpkembedError):
    """Training produced a non-finite loss."""


class FormatError(SpkembedError):
    """A binary or text file does not match its declared format."""


class ParseError(SpkembedError):
    """A text file failed to parse; carries the offending line number."""

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class InsufficientDataError(SpkembedError):
    """Not enough data points to fit or evaluate."""


class DegenerateEmbeddingError(SpkembedError):
    """An embedding collapsed to the zero vector."""


class DataReferenceError(SpkembedError):
    """A trial list references ids that are not present; carries the ids."""

    def __init__(self, message, missing_ids=()):
        super().__init__(message)
        self.missing_ids = list(missing_ids)
