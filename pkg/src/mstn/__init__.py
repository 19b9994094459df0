"""MSTN: a multi-scale temporal network for time-series forecasting,
imputation and classification, on a small numpy autodiff core."""

from .config import CORES, TASKS, VARIANTS, MstnConfig, make_ablated
from .errors import (ConfigError, ContractError, DataError, DegenerateError, DimensionError, MstnError,
                     NumericError, ProtocolError, WeightsError)
from .model import MSTN, param_count, serialized_size_bytes
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["CORES", "TASKS", "VARIANTS", "MstnConfig", "make_ablated", "MSTN", "param_count",
           "serialized_size_bytes", "Tensor", "no_grad", "MstnError", "ConfigError", "ContractError",
           "DataError", "DegenerateError", "DimensionError", "NumericError", "ProtocolError", "WeightsError"]
