"""Exception hierarchy shared across the package."""


class MOFSError(Exception):
    pass


class GenerationError(MOFSError):
    """A synthetic sample could not be produced (singular solve, CFL violation)."""


class DatasetFormatError(MOFSError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class HeaderError(DatasetFormatError):
    """Header bytes are not valid, canonical, checksummed JSON."""


class ShapeMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ConfigurationError(MOFSError, ValueError):
    pass


class NumericalError(MOFSError, FloatingPointError):
    """Non-finite activation or loss. Carries enough context to locate the failure."""


class VisionBackboneUnavailable(MOFSError):
    pass


class EmptyMemoryError(MOFSError, LookupError):
    """Retrieval on an empty buffer; callers fall back to zero memory vectors."""
