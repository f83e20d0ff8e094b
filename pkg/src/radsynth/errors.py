"""Exception types shared across the package."""


class RadsynthError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RadsynthError):
    """Tensor or array dimensions are inconsistent with the operation."""


class GraphError(RadsynthError):
    """A tensor does not participate in the differentiation graph."""


class ConfigError(RadsynthError):
    """Invalid or inconsistent configuration."""


class StateError(RadsynthError):
    """Operation invoked in a state that does not permit it."""


class DataError(RadsynthError):
    """Input data is empty, malformed, or contains invalid values."""


class ValidationError(RadsynthError):
    """A record failed validation; message names the offending field."""


class MathError(RadsynthError):
    """Numerical precondition violated (e.g. non-symmetric matrix)."""


class FormatError(RadsynthError):
    """File contents do not match the expected format."""


class CropError(RadsynthError):
    """Crop specification yields an empty rectangle."""


class CalibrationError(RadsynthError):
    """Iterative calibration failed to converge."""


class TrainingAbort(RadsynthError):
    """Training stopped due to a non-finite loss or gradient."""
