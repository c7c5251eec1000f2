"""Exception hierarchy shared by every module."""


class SplatError(Exception):
    """Base class for all library errors."""


class NonFiniteError(SplatError, ValueError):
    pass


class NonPositiveScaleError(SplatError, ValueError):
    pass


class DegenerateSplatError(SplatError):
    pass


class EmptySceneError(SplatError):
    pass


class StaleRenderError(SplatError):
    pass


class DegenerateExtentError(SplatError):
    pass


class InvalidDeltaError(SplatError):
    pass


class EmptyAfterPruneError(SplatError):
    pass


class NoDepthError(SplatError):
    pass


class EmptyMaskError(SplatError):
    pass


class ImageTooSmallError(SplatError):
    pass


class NoValidPairsError(SplatError):
    pass


class NoReferencesError(SplatError):
    pass


class ShapeMismatchError(SplatError, ValueError):
    pass


class DivergedLossError(SplatError):
    pass


class EmptyCloudError(SplatError):
    pass


class DegenerateConfigurationError(SplatError):
    pass


class CorruptFileError(SplatError):
    pass


class UnsupportedVersionError(SplatError):
    pass


class DecodeError(SplatError):
    pass


class ResolutionMismatchError(SplatError):
    pass
