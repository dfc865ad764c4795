"""Exception types shared across the package.

The CLI maps these onto exit codes: format/config/data problems exit 2,
invariant violations exit 3, training divergence exit 4.
"""


class MarginfitError(Exception):
    """Base class for all package errors."""


class ZeroNorm(MarginfitError):
    """A vector that must be normalized has (numerically) zero norm."""


class DimMismatch(MarginfitError):
    """Operands have incompatible shapes."""


class InvalidLabel(MarginfitError):
    """A label index is outside [0, C)."""


class MarginShapeMismatch(MarginfitError):
    """Margin matrix shape does not match the number of classes."""


class UnknownClass(MarginfitError):
    """A class id is not present in the margin matrix."""


class FormatError(MarginfitError):
    """A binary container is malformed (bad magic, truncation, size lie)."""


class NonFiniteData(MarginfitError):
    """Data contains NaN or Inf where finite values are required."""


class LabelOutOfRange(MarginfitError):
    """A stored label index is >= the declared class count."""


class InvariantViolation(MarginfitError):
    """Loaded or constructed data violates a documented invariant."""


class DegenerateRange(MarginfitError):
    """Min-max normalization requested but all distances are equal."""


class ConfigError(MarginfitError):
    """A configuration value or combination is invalid."""


class DivergenceError(MarginfitError):
    """Training produced a non-finite loss."""


class EmptyGallery(MarginfitError):
    """Retrieval evaluation requires a non-empty gallery."""
