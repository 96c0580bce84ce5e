"""Exception hierarchy shared across the pipeline.

All validation failures derive from ``GeoproxyError`` so the CLI can map
them to exit status 1, keeping exit status 2 for genuine I/O failures.
"""


class GeoproxyError(Exception):
    """Base class for all pipeline validation errors."""


class SchemaError(GeoproxyError):
    """A band set, column set, or array shape does not match the contract."""


class CoverageError(GeoproxyError):
    """A footprint or centroid does not intersect the queried grid."""


class InputError(GeoproxyError):
    """An input collection is empty or otherwise unusable."""


class DataError(GeoproxyError):
    """Parsed values violate a documented range or consistency rule."""


class ProtocolError(GeoproxyError):
    """An evaluation protocol precondition is not met (missing round, bad split)."""


class NumericalError(GeoproxyError):
    """A numerical routine cannot proceed (non-PSD covariance, etc.)."""


class TrainingDiverged(GeoproxyError):
    """Training produced a non-finite loss; message names the epoch/batch."""
