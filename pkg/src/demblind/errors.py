"""Exception hierarchy for demblind."""


class DemBlindError(Exception):
    """Base class for all package errors."""


class RasterError(DemBlindError):
    """Raster could not be loaded."""


class RasterReadError(RasterError):
    """File missing or unreadable."""


class RasterFormatError(RasterError):
    """Malformed header or sidecar."""


class RasterDimensionError(RasterError):
    """Number of samples disagrees with the declared dimensions."""


class DegenerateModelError(DemBlindError):
    """Covariance matrix could not be factorized even after jitter."""


class UnboundedCRLBError(DemBlindError):
    """Reduced Fisher information is singular; the patch carries no information."""


class ModelInestimableError(DemBlindError):
    """Regression design is rank deficient or has too few rows."""
