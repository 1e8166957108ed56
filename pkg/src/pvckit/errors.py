"""Exception types raised across pvckit."""


class PvcError(Exception):
    """Base class for all pvckit errors."""


class DimensionError(PvcError, ValueError):
    """Shapes of operands are incompatible."""


class ContractError(PvcError, ValueError):
    """A call violated a documented precondition."""


class DegenerateRegionError(PvcError, ValueError):
    """A labelled region is empty or has a zero mean where one is required."""


class WindowError(PvcError, ValueError):
    """Image extents are too small for the requested sliding window."""


class ConfigError(PvcError, ValueError):
    """A configuration cannot produce a valid model or run."""


class NonFiniteError(PvcError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""
