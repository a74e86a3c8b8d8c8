"""Exception hierarchy shared by every stage of the engine."""


class PancutError(Exception):
    """Base class for all engine errors."""


class FormatError(PancutError):
    """A file could not be decoded (bad magic, header, or encoding)."""


class DataError(PancutError):
    """Decoded data violates a value invariant (e.g. NaN/Inf)."""


class ShapeError(PancutError):
    """Array rank or dimensions do not match what the caller promised."""


class RangeError(PancutError):
    """A value does not fit the target representation."""


class EmptyGraphError(PancutError):
    """A graph operation was requested on an empty node set."""


class PartitionError(PancutError):
    """A bipartition is malformed (empty side, overlap, missing nodes)."""


class SizeError(PancutError):
    """Problem too large for the requested dense method."""


class ConvergenceError(PancutError):
    """Iterative eigensolver did not reach tolerance."""

    def __init__(self, message, best_residual=float("nan")):
        super().__init__(message)
        self.best_residual = best_residual


class DegenerateCutError(PancutError):
    """The spectral split carries no structure (one side empty)."""


class EmptyMaskError(PancutError):
    """An object mask covers nothing on the grid it is projected to."""


class LabelError(PancutError):
    """A label map holds an id outside the configured class range."""


class EmptyEvalError(PancutError):
    """No class has a nonzero union; mIoU is undefined."""
