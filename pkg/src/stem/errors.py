"""Exception hierarchy shared across the package."""


class StemError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(StemError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(StemError):
    """Non-finite values encountered where finiteness is required."""


class ParameterError(StemError):
    """Invalid argument or configuration value."""


class PanelError(StemError):
    """Input does not conform to the active gene panel."""


class SelectionError(StemError):
    """Gene-panel selection cannot satisfy the request."""


class OracleError(StemError):
    """Synthetic-benchmark oracle precondition violated."""


class FormatError(StemError):
    """On-disk artifact is malformed or has the wrong version."""
