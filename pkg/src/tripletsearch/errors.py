"""Exception types shared across the package."""


class TripletSearchError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(TripletSearchError, ValueError):
    """Arguments have mismatched shapes or are otherwise malformed."""


class DegenerateInputError(TripletSearchError, ValueError):
    """A vector has (near) zero norm, usually a sign of embedding collapse."""


class ConfigError(TripletSearchError, ValueError):
    """A configuration value violates its invariants."""


class DatasetFormatError(TripletSearchError, ValueError):
    """A dataset file could not be parsed.

    ``line`` is the 1-based physical line number when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateIdError(DatasetFormatError):
    def __init__(self, image_id, line=None):
        super().__init__(f"duplicate image_id {image_id!r}", line=line)
        self.image_id = image_id


class TrainingDivergedError(TripletSearchError, FloatingPointError):
    """An optimizer step produced non-finite parameters."""
