"""Exception hierarchy for lorapack.

Library code raises these; only the CLI maps them to exit codes.
"""


class LorapackError(Exception):
    """Base class for all lorapack errors."""


class ContainerFormatError(LorapackError, ValueError):
    """A .qla/.lqz file (or an in-memory container) is malformed."""


class ConfigError(LorapackError, ValueError):
    """A quantization, optimization or CLI configuration is invalid."""


class QuantizationError(LorapackError, ValueError):
    """Codes, bit streams or group parameters are inconsistent."""


class SvdConvergenceError(LorapackError, ArithmeticError):
    """Jacobi sweeps did not converge within the iteration cap."""


class DegenerateSpectrumError(LorapackError, ValueError):
    """All singular values are zero, so the variance ratio is undefined."""
