"""Exception hierarchy shared across the package."""


class LungQuantError(Exception):
    """Base class for all package errors."""


class VolumeFormatError(LungQuantError):
    """A NIfTI file could not be parsed or holds unusable data."""


class UnsupportedBitDepthError(VolumeFormatError):
    """Intensity volume stored with 8-bit depth (HU range is lost)."""


class GeometryError(LungQuantError):
    """Shapes, spacings or boxes that do not line up."""


class EmptyMaskError(LungQuantError):
    """An operation needed foreground voxels and found none."""


class StageError(LungQuantError):
    """Failure inside a named pipeline stage.

    The original exception is kept as ``__cause__``.
    """

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message
