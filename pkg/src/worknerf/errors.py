"""Exception types shared across the package."""


class WorknerfError(Exception):
    """Base class for all package-specific errors."""


class BehindCamera(WorknerfError):
    """A 3D point has non-positive depth in the camera frame and is not observable."""


class OutOfBounds(WorknerfError):
    """A sample coordinate lies outside the valid interpolation domain."""


class NoIntersection(WorknerfError):
    """A ray does not intersect the requested volume."""


class DomainError(WorknerfError):
    """A numeric argument violates its mathematical domain."""


class ShapeError(WorknerfError):
    """An array argument has an unsupported shape."""


class GraphError(WorknerfError):
    """Gradients were requested but no differentiable forward pass was recorded."""


class PlacementFailed(WorknerfError):
    """Rejection sampling could not place the requested objects in the workspace."""


class FormatError(WorknerfError):
    """An on-disk artifact is malformed or has an unsupported version."""


class EmptyMask(WorknerfError):
    """A masked reduction was requested with no valid pixels."""


class ConfigError(WorknerfError):
    """A configuration value or combination is invalid."""
