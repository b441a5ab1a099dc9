"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: ``ConfigError`` -> 2,
``ProtocolError`` -> 3; everything else that escapes is a bug.
"""


class FSODError(Exception):
    """Base class for every structured error raised by this package."""


class ShapeError(FSODError, ValueError):
    """Tensor shapes or channel counts do not line up."""


class ConfigError(FSODError, ValueError):
    """Invalid or unknown configuration value."""


class ProtocolError(FSODError, RuntimeError):
    """The base-train / fine-tune protocol was violated."""


class ParseError(FSODError, ValueError):
    """An annotation file could not be parsed."""


class SamplingError(FSODError, ValueError):
    """K-shot sampling could not be satisfied."""


class GradcheckError(FSODError, ArithmeticError):
    """Analytic gradient is not finite."""
