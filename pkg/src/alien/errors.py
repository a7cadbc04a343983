"""Exception hierarchy shared by all modules."""


class AlienError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(AlienError, ValueError):
    """Invalid cell/chip/anchor geometry."""


class TooManyTargetsError(AlienError, ValueError):
    """A cell holds more targets than it has anchor-points."""


class CapacityExceededError(TooManyTargetsError):
    pass


class ShapeMismatchError(AlienError, ValueError):
    pass


class OddDimensionError(ShapeMismatchError):
    pass


class BadMagicError(AlienError, ValueError):
    pass


class TruncatedFileError(AlienError, ValueError):
    pass


class NoForwardStateError(AlienError, RuntimeError):
    """backward was called without a preceding train-mode forward pass."""


class PlacementError(AlienError, RuntimeError):
    """Rejection sampling could not place every target."""


class DimensionMismatchError(AlienError, ValueError):
    pass


class DivergedError(AlienError, FloatingPointError):
    """Training produced a non-finite loss."""


class UndefinedMetricError(AlienError, ValueError):
    pass


class FormatError(AlienError, ValueError):
    """A text or image file does not follow its documented layout."""
