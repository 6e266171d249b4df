"""Exception hierarchy and warning categories.

Data errors (anything wrong with files, layouts, or shapes) derive from
DataError; configuration problems from ConfigError; numeric failures during
optimization from NumericError.  The CLI maps these to distinct exit codes.
"""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EngineError):
    """Invalid configuration or argument combination."""


class DataError(EngineError):
    """Invalid on-disk data or inconsistent in-memory values."""


class BadMagicError(DataError):
    """Tensor file does not start with the expected magic bytes."""


class ShapeMismatchError(DataError):
    """Tensor header shape disagrees with the payload length, or two
    arrays that must share a shape do not."""


class NonFiniteError(DataError):
    """A tensor payload contains NaN or Inf."""


class MissingViewError(DataError):
    """A sample directory lacks one of its declared views."""


class CameraError(DataError):
    """camera.json is unreadable or violates camera invariants."""


class DimensionMismatchError(DataError):
    """Image/depth/mask/feature dimensions are inconsistent."""


class NumericError(EngineError):
    """Loss or gradient became non-finite during optimization."""


class EngineWarning(UserWarning):
    """Base warning category for recoverable oddities."""


class DegenerateInputWarning(EngineWarning):
    """Input is valid but degenerate (e.g. a single view, empty candidate
    lists); the operation falls back to a documented default."""
