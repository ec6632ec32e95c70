"""Exception types shared across the toolkit."""


class SsmPtqError(Exception):
    """Base class for all toolkit errors (CLI maps these to exit code 1)."""


class ShapeError(SsmPtqError):
    """Operand shapes are incompatible; message names both shapes."""


class DataError(SsmPtqError):
    """Input data violates a precondition (NaN/Inf, empty axis, bad range)."""


class ArchiveError(SsmPtqError):
    """Base class for tensor-archive format violations."""


class BadMagicError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


class TruncatedPayloadError(ArchiveError):
    pass


class OverlappingRangeError(ArchiveError):
    pass


class DuplicateNameError(ArchiveError):
    pass


class MissingTensorError(SsmPtqError):
    """A required tensor is absent from an archive; message names it."""


class ConfigError(SsmPtqError):
    """Inconsistent model or quantization configuration."""
