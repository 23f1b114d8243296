"""Exception types shared across the package."""


class LongfuseError(Exception):
    """Base class for all longfuse errors."""


class NiftiError(LongfuseError):
    """Malformed, unsupported, or unreadable NIfTI file."""


class GeometryError(LongfuseError):
    """Volumes that should share a grid (dims/spacing) do not, or a
    volume violates its own invariants."""


class DegenerateMatrixError(LongfuseError):
    """Weight solve on a singular system with alpha = 0."""


class FusionError(LongfuseError):
    """Failure inside the fusion driver; carries voxel coordinates."""

    def __init__(self, message: str, voxel=None, time_index=None):
        if voxel is not None:
            message = f"{message} [voxel={tuple(voxel)}, t={time_index}]"
        super().__init__(message)
        self.voxel = tuple(voxel) if voxel is not None else None
        self.time_index = time_index


class PhantomError(LongfuseError):
    """Invalid phantom parameters (e.g. structure out of bounds)."""
