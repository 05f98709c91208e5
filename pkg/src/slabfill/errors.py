"""Exception hierarchy shared by every module."""


class SlabfillError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SlabfillError, ValueError):
    pass


class IoFailure(SlabfillError, OSError):
    pass


class UnsupportedDatatype(SlabfillError, ValueError):
    pass


class MalformedHeader(SlabfillError, ValueError):
    pass


class TruncatedData(SlabfillError, ValueError):
    pass


class OutOfBounds(SlabfillError, IndexError):
    pass


class OutOfRange(SlabfillError, ValueError):
    pass


class ShapeMismatch(SlabfillError, ValueError):
    pass


class ShapeNotDivisible(SlabfillError, ValueError):
    pass


class DegenerateDistances(SlabfillError, ValueError):
    pass


class VolumeTooSmall(SlabfillError, ValueError):
    pass


class StaleCache(SlabfillError, RuntimeError):
    pass


class ModelFormatError(SlabfillError, ValueError):
    """Model file cannot be used with this build."""


class BadMagic(ModelFormatError):
    pass


class VersionMismatch(ModelFormatError):
    pass


class ShapeMismatchWithConfig(ModelFormatError):
    pass


class ChannelMismatch(SlabfillError, ValueError):
    pass
