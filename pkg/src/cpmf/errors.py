"""Exception hierarchy shared by the whole package."""


class CpmfError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(CpmfError):
    """A file exists but does not match the expected format."""


class EmptyCloudError(CpmfError):
    """An operation received or produced a cloud with zero points."""


class InsufficientPointsError(CpmfError):
    """Too few points for the requested geometric operation."""


class DegenerateGeometryError(CpmfError):
    """The input geometry does not determine a solution (e.g. collinear points)."""


class EmptyForegroundError(CpmfError):
    """Background removal left no points."""


class UndefinedMetricError(CpmfError):
    """The metric is undefined for this input (e.g. a single class)."""


class BankFormatError(CpmfError):
    """A memory-bank file is corrupt or incompatible."""
