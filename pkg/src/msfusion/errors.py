"""Exception hierarchy shared across the toolkit."""


class MsFusionError(Exception):
    """Base class for every error raised by msfusion."""


class InvariantError(MsFusionError, ValueError):
    """A value violates a documented type invariant."""


# --- image / manifest I/O -------------------------------------------------


class ImageIOError(MsFusionError, OSError):
    pass


class MissingFileError(ImageIOError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageIOError):
    pass


class CorruptHeaderError(ImageIOError):
    pass


class UnwritablePathError(ImageIOError):
    pass


class ManifestError(MsFusionError, ValueError):
    pass


class DuplicateFrameIdError(ManifestError):
    pass


class InvalidTimestampError(ManifestError):
    pass


class MissingColumnError(ManifestError):
    pass


# --- geometry ---------------------------------------------------------------


class PointBehindCameraError(MsFusionError, ArithmeticError):
    pass


class PointAtInfinityError(MsFusionError, ArithmeticError):
    pass


class UnderDeterminedError(MsFusionError, ValueError):
    pass


class SingularSystemError(MsFusionError, ArithmeticError):
    pass


class DegenerateConfigurationError(MsFusionError, ValueError):
    pass


class TooFewCorrespondencesError(MsFusionError, ValueError):
    pass


class NoConsensusError(MsFusionError, RuntimeError):
    pass


class NonInvertibleError(MsFusionError, ArithmeticError):
    pass


# --- features / sync / fusion ----------------------------------------------


class ImageTooSmallError(MsFusionError, ValueError):
    pass


class PatchOutsideImageError(MsFusionError, ValueError):
    pass


class EmptyStreamError(MsFusionError, ValueError):
    pass


class DimensionMismatchError(MsFusionError, ValueError):
    pass


class EmptyImageError(MsFusionError, ValueError):
    pass


class ConfigError(MsFusionError, ValueError):
    pass
