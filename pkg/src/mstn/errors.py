"""Exception hierarchy shared by every subsystem.

The CLI maps each family onto a fixed exit code, so new errors should
subclass one of these rather than raising bare ``ValueError``.
"""


class MstnError(Exception):
    exit_code = 1


class ConfigError(MstnError, ValueError):
    """Invalid hyperparameters, unknown config keys, bad flags."""

    exit_code = 1


class DimensionError(MstnError, ValueError):
    """Shapes of operands do not agree."""

    exit_code = 1


class ContractError(MstnError, RuntimeError):
    """An operation was called in a state its contract does not allow."""

    exit_code = 1


class DataError(MstnError, ValueError):
    """Malformed or unusable input data."""

    exit_code = 2


class ProtocolError(DataError):
    """A split is too short or otherwise incompatible with a window/mask protocol."""


class DegenerateError(DataError):
    """Degenerate inputs: constant features, empty masks, tiny batches."""


class NumericError(MstnError, FloatingPointError):
    """NaN or Inf appeared where finite values are required."""

    exit_code = 3


class WeightsError(MstnError, ValueError):
    """Weight file is corrupt or does not match the model config."""

    exit_code = 4
