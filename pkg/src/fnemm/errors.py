"""Exception hierarchy shared by all fnemm modules."""


class FnemmError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(FnemmError):
    """A persisted file is malformed (bad magic, bad field, undecodable text)."""


class TruncationError(FormatError):
    """A persisted file declares more bytes than it contains."""


class VersionError(FormatError):
    """A persisted file carries an unsupported format version."""


class IoError(FnemmError):
    """An OS-level read/write failure (missing file, unwritable path)."""


class ValidationError(FnemmError):
    """An in-memory value or input violates a documented invariant."""


class InsufficientDataError(ValidationError):
    """Too few samples to fit statistics (at least two are required)."""


class EmptyCaptionError(ValidationError):
    """A caption tokenized to nothing where a non-empty one is required."""


class DimensionError(FnemmError):
    """Operands have incompatible shapes or lengths."""


class NumericError(FnemmError):
    """Training arithmetic produced non-finite values; the run must stop."""


class DegenerateVectorWarning(UserWarning):
    """A zero-norm vector was fed to cosine similarity; the result is 0."""
