"""Exception hierarchy shared by every siamseg module."""

from __future__ import annotations


class SiamSegError(RuntimeError):
    """Base class for all errors raised by siamseg."""


class ShapeError(SiamSegError, ValueError):
    """Arrays or tensors whose shapes do not agree."""


class ClassIdError(SiamSegError, ValueError):
    """A label map holds a class id outside {0..C-1} and is not the ignore value."""


class TilingError(SiamSegError, ValueError):
    """An image is too small for the requested crop."""


class ManifestError(SiamSegError):
    """A manifest or split list is inconsistent or malformed."""


class DataError(SiamSegError):
    """Base class for raster loading failures."""


class MissingRasterError(DataError):
    """A raster referenced by a manifest does not exist."""


class CorruptRasterError(DataError):
    """A raster exists but cannot be decoded."""


class RasterSizeMismatchError(DataError):
    """An image and its label raster disagree in size."""


class SynthesisError(SiamSegError):
    """Synthetic scene generation could not place its shapes."""


class AugmentationError(SiamSegError):
    """An augmentation could not draw valid parameters."""


class ParameterMismatchError(SiamSegError, ValueError):
    """Two models that must share parameter names do not."""


class NonFiniteLossError(SiamSegError, FloatingPointError):
    """A loss term evaluated to inf or nan."""


class ConfigError(SiamSegError, ValueError):
    """A run configuration is malformed; the message names the offending key."""


class CommandError(SiamSegError):
    """A command-line precondition failed."""
