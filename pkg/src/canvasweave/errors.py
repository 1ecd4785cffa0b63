"""Exception types shared across the pipeline.

The CLI maps each family to its own exit code, so raise the most specific
class that applies.
"""


class CanvasWeaveError(Exception):
    pass


class ConfigError(CanvasWeaveError, ValueError):
    """Invalid parameters: bad spec fields, window sizes, labels, pools."""


class DataError(CanvasWeaveError):
    """Input data cannot support the requested operation."""


class SizeError(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class MetadataError(DataError):
    pass


class NoPeakError(DataError):
    """No periodic component stands out of the spectral noise floor."""


class CheckpointError(CanvasWeaveError):
    pass


class NumericalError(CanvasWeaveError, ArithmeticError):
    """Non-finite loss during training or an undefined divergence."""


class DivergenceUndefinedError(NumericalError):
    pass
