"""Exception types shared across the package."""


class GroundingError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GroundingError, ValueError):
    """An array argument has the wrong shape or dimensionality."""


class DegenerateBatchError(GroundingError, ValueError):
    """Train-mode batch statistics requested for a batch of size < 2."""


class CacheError(GroundingError, ValueError):
    """A backward pass received a cache from a different forward call."""


class NumericError(GroundingError, ArithmeticError):
    """A computation produced a non-finite value."""


class DataFormatError(GroundingError, ValueError):
    """A file does not conform to its declared on-disk format."""


class MissingNegativesError(GroundingError, KeyError):
    """A caption has no precomputed negative set in the cache."""
