"""Quantization parameters, (de)quantization, and importance metrics.

An activation tensor is mapped to b-bit levels with

    scale = (max - min) / (2^b - 1)
    Q     = round((X - min) / scale)        (ties away from zero)

and reconstructed as Q * scale + min. Degenerate tensors (max == min) get
scale 0 and all levels 0. Bit-width 0 means "not stored", 32 means
full-precision passthrough; neither goes through this mapping.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import reduce as red
from ._backend import kernels
from .errors import CorruptData, InvalidInput

SUPPORTED_BITWIDTHS = (2, 4, 8)
STORABLE_BITWIDTHS = (0, 2, 4, 8, 32)

_F32 = np.float32


def check_tensor(x, opname="quant"):
    """Validate a tensor argument: non-empty, all values finite.

    Returns a contiguous flat float32 view/copy.
    """
    arr = np.ascontiguousarray(x, dtype=_F32).ravel()
    if arr.size == 0:
        raise InvalidInput(f"{opname}: empty tensor")
    if not np.isfinite(arr).all():
        raise InvalidInput(f"{opname}: tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class QuantParams:
    """Bit-width plus the (min, scale) pair governing the level mapping."""

    bitwidth: int
    min: float
    scale: float

    def __post_init__(self):
        if self.bitwidth not in STORABLE_BITWIDTHS:
            raise InvalidInput(f"unsupported bitwidth {self.bitwidth}")
        if self.scale < 0:
            raise InvalidInput("scale must be non-negative")

    @property
    def num_levels(self):
        return 1 << self.bitwidth

    @property
    def qmax(self):
        return (1 << self.bitwidth) - 1


PASSTHROUGH_PARAMS = QuantParams(bitwidth=32, min=0.0, scale=1.0)


def compute_qparams(x, bitwidth, cfg=None):
    """Scan min/max (through the reduction module) and derive the scale."""
    if bitwidth not in SUPPORTED_BITWIDTHS:
        raise InvalidInput(f"compute_qparams: bitwidth must be one of {SUPPORTED_BITWIDTHS}")
    arr = check_tensor(x, "compute_qparams")
    mn = _F32(red.reduce(arr, red.ReduceOp.MIN, cfg))
    mx = _F32(red.reduce(arr, red.ReduceOp.MAX, cfg))
    scale = (mx - mn) / _F32((1 << bitwidth) - 1)
    return QuantParams(bitwidth=bitwidth, min=float(mn), scale=float(scale))


def quantize(x, params):
    """Map to integer levels; output is uint32, one full-width value per
    element, in [0, 2^b - 1]. All levels are 0 when scale is 0."""
    if params.bitwidth not in SUPPORTED_BITWIDTHS:
        raise InvalidInput(
            "quantize: bitwidth 0/32 entries are handled by the storage policy"
        )
    arr = check_tensor(x, "quantize")
    return kernels.quantize_values(arr, params.min, params.scale, params.qmax)


def dequantize(q_values, params):
    """Reconstruct float32 values Q * scale + min."""
    if params.bitwidth not in SUPPORTED_BITWIDTHS:
        raise InvalidInput("dequantize: bitwidth must be one of {2, 4, 8}")
    q = np.ascontiguousarray(q_values, dtype=np.uint32).ravel()
    if q.size and int(q.max()) > params.qmax:
        raise CorruptData(
            f"quantized value exceeds {params.qmax} for bitwidth {params.bitwidth}"
        )
    return kernels.dequantize_values(q, params.min, params.scale)


class ImportanceMetric(str, enum.Enum):
    RANGE = "range"
    MAGNITUDE = "magnitude"
    QUANT_ERROR = "qerr"


def importance(x, metric=ImportanceMetric.QUANT_ERROR, cfg=None):
    """Non-negative importance score of a tensor.

    RANGE       max - min
    MAGNITUDE   L2 norm
    QUANT_ERROR expected 4-bit quantization error proxy,
                scale(b=4)/2 * sqrt(numel)
    """
    arr = check_tensor(x, "importance")
    metric = ImportanceMetric(metric)
    if metric is ImportanceMetric.MAGNITUDE:
        return float(math.sqrt(np.sum(np.square(arr, dtype=np.float64))))
    mn = red.reduce(arr, red.ReduceOp.MIN, cfg)
    mx = red.reduce(arr, red.ReduceOp.MAX, cfg)
    if metric is ImportanceMetric.RANGE:
        return mx - mn
    scale4 = (mx - mn) / 15.0
    return scale4 / 2.0 * math.sqrt(arr.size)


@dataclass(frozen=True)
class ImportanceState:
    """Exponentially smoothed importance of one activation."""

    current: float = 0.0
    moving_average: float = 0.0
    decay: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise InvalidInput("decay must lie in (0, 1)")
        if self.current < 0 or self.moving_average < 0:
            raise InvalidInput("importance values must be non-negative")


def ema_update(state, observed):
    """Fold a fresh observation into the moving average:
    ma <- decay * ma + (1 - decay) * observed."""
    if observed < 0:
        raise InvalidInput("ema_update: observed importance must be non-negative")
    ma = state.decay * state.moving_average + (1.0 - state.decay) * observed
    return ImportanceState(current=observed, moving_average=ma, decay=state.decay)
