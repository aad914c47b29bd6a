"""Per-tensor linear quantization with unsigned 8-bit storage.

A real value ``v`` maps to ``floor(v / scale) + zero_point`` saturated to
``[0, 255]`` and back via ``(q - zero_point) * scale``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

QMIN = 0
QMAX = 255

# Floors tolerate landing a hair below an integer. Scales are float32, so
# v/scale for an exactly representable v can be off by up to ~255 * 2**-24
# steps; 1e-4 of a step covers that with margin.
_FLOOR_EPS = 1e-4
_MIN_SCALE = float(np.finfo(np.float32).tiny)


@dataclass(frozen=True)
class QuantParams:
    """Scale and zero point; the scale is held at float32 precision so that
    checkpoints round-trip exactly."""

    scale: float
    zero_point: int

    def __post_init__(self):
        scale = float(np.float32(self.scale))
        if not (scale > 0 and math.isfinite(scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not QMIN <= int(self.zero_point) <= QMAX:
            raise ValueError(f"zero_point must be in [0, 255], got {self.zero_point}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def lo(self) -> float:
        """Smallest representable real value."""
        return (QMIN - self.zero_point) * self.scale

    @property
    def hi(self) -> float:
        return (QMAX - self.zero_point) * self.scale


@dataclass
class QTensor:
    """8-bit payload plus the quantization parameters that give it meaning."""

    data: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        if not isinstance(self.data, np.ndarray) or self.data.dtype != np.uint8:
            raise TypeError("QTensor payload must be a uint8 ndarray")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def reshape(self, *shape) -> "QTensor":
        return QTensor(self.data.reshape(*shape), self.qparams)

    def centered(self) -> np.ndarray:
        """Payload minus zero point as exact float64 integers."""
        return self.data.astype(np.float64) - self.qparams.zero_point

    def dequantize(self) -> np.ndarray:
        return dequantize_tensor(self)


def derive_qparams(f_min: float, f_max: float) -> QuantParams:
    """Scale and zero point covering ``[f_min, f_max]`` (widened to include 0)."""
    f_min, f_max = float(f_min), float(f_max)
    if f_min > f_max:
        raise ValueError(f"f_min ({f_min}) > f_max ({f_max})")
    f_min = min(f_min, 0.0)
    f_max = max(f_max, 0.0)
    if f_min == f_max:
        # constant (zero) range
        return QuantParams(1.0 / 255.0, int(np.clip(math.floor(-f_min * 255.0), QMIN, QMAX)))
    # a range too narrow for float32 still needs a usable, positive scale
    scale = max(float(np.float32((f_max - f_min) / 255.0)), _MIN_SCALE)
    zero_point = math.floor(-f_min / scale + _FLOOR_EPS)
    return QuantParams(scale, int(np.clip(zero_point, QMIN, QMAX)))


ROUNDING = ("floor", "nearest")


def _round(x, rounding: str):
    if rounding == "floor":
        return np.floor(x + _FLOOR_EPS)
    if rounding == "nearest":
        return np.rint(x)
    raise ValueError(f"rounding must be one of {ROUNDING}, got {rounding!r}")


def quantize(v, qp: QuantParams, rounding: str = "floor"):
    """``floor(v / s) + z`` saturated to ``[0, 255]``.

    ``rounding="nearest"`` rounds half to even instead of flooring; training
    uses it where the one-sided floor error would accumulate. Scalars give a
    Python int, arrays a uint8 array.
    """
    if np.isscalar(v):
        q = int(_round(float(v) / qp.scale, rounding)) + qp.zero_point
        return int(min(max(q, QMIN), QMAX))
    arr = np.asarray(v, dtype=np.float64)
    q = _round(arr / qp.scale, rounding) + qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.uint8)


def dequantize(q, qp: QuantParams):
    if np.isscalar(q):
        return (int(q) - qp.zero_point) * qp.scale
    return (np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale


def quantize_tensor(t: np.ndarray, qp: Optional[QuantParams] = None, rounding: str = "floor") -> QTensor:
    """Quantize a float tensor; qparams come from its own min/max unless given."""
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError(f"cannot quantize an empty tensor of shape {t.shape}")
    if qp is None:
        qp = derive_qparams(float(t.min()), float(t.max()))
    return QTensor(quantize(t, qp, rounding), qp)


def dequantize_tensor(t: QTensor) -> np.ndarray:
    return dequantize(t.data, t.qparams).astype(np.float32)


def requantize(
    acc: np.ndarray, acc_scale: float, out_qp: QuantParams, relu: bool = False, rounding: str = "floor"
) -> QTensor:
    """Map an integer accumulator at ``acc_scale`` into an 8-bit tensor.

    Computes ``floor(acc_scale / s_out * acc) + z_out``; with ``relu`` the
    result is clamped from below at the zero point.
    """
    m = acc_scale / out_qp.scale
    q = _round(m * acc, rounding) + out_qp.zero_point
    lo = out_qp.zero_point if relu else QMIN
    return QTensor(np.clip(q, lo, QMAX).astype(np.uint8), out_qp)


class RangeTracker:
    """Exponential moving average of an observed value range.

    Supplies the output qparams of activations and propagated errors. The
    first observation initialises the range directly.
    """

    def __init__(self, momentum: float = 0.99):
        self.momentum = momentum
        self.lo: Optional[float] = None
        self.hi: Optional[float] = None

    @property
    def initialized(self) -> bool:
        return self.lo is not None

    def observe(self, lo: float, hi: float) -> None:
        if self.lo is None:
            self.lo, self.hi = float(lo), float(hi)
        else:
            m = self.momentum
            self.lo = m * self.lo + (1.0 - m) * float(lo)
            self.hi = m * self.hi + (1.0 - m) * float(hi)

    def qparams(self) -> QuantParams:
        if self.lo is None:
            raise RuntimeError("range tracker has no observations")
        return derive_qparams(self.lo, self.hi)

    def reset(self) -> None:
        self.lo = self.hi = None

    def state(self) -> tuple:
        return (self.lo, self.hi)
