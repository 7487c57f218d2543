"""Distance-aware quantization: a zero-gap soft rounding quantizer and its training harness."""

from daq.core import (
    QuantizationError,
    QuantizerParams,
    QuantizerSpec,
    daq_backward,
    daq_forward,
    staircase,
)

__all__ = [
    "QuantizationError",
    "QuantizerParams",
    "QuantizerSpec",
    "daq_backward",
    "daq_forward",
    "staircase",
]
__version__ = "0.1.0"
