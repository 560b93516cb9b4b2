"""Uniform asymmetric quantization primitives.

A float x maps to a k-bit signed code via

    q = clamp(round(x / s) + z, -2^(k-1), 2^(k-1) - 1)

and reconstructs as x^ = s * (q - z). Rounding is round-half-to-even.
Parameters come from the Min-Max fit over the values sharing them:
s = (xmax - xmin) / 2^k and z places the representable window over
[xmin, xmax].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# Floor for the scale so a constant (zero-range) group still quantizes.
EPS_SCALE = 1e-8


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero point and bit width for one quantization group."""

    scale: float
    zero_point: int
    bits: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValidationError(f"scale must be positive and finite, got {self.scale}")
        if not 2 <= self.bits <= 16:
            raise ValidationError(f"bits {self.bits} outside [2, 16]")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def _scale_as_f32(scale: np.ndarray) -> np.ndarray:
    """Round scales up to the next representable float32. An upward-rounded
    scale keeps the representable window at least as wide as the fitted
    range, so the in-range error bound survives the narrowing."""
    s32 = scale.astype(np.float32)
    low = s32.astype(np.float64) < scale
    s32[low] = np.nextafter(s32[low], np.float32(np.inf))
    return s32.astype(np.float64)


def minmax_params(xmin: float, xmax: float, bits: int) -> QuantParams:
    """Fit quantization parameters to an observed value range."""
    if not (math.isfinite(xmin) and math.isfinite(xmax)):
        raise ValidationError("range endpoints must be finite")
    if xmin > xmax:
        raise ValidationError(f"xmin {xmin} > xmax {xmax}")
    raw = max((float(xmax) - float(xmin)) / 2.0**bits, EPS_SCALE)
    scale = float(_scale_as_f32(np.array([raw]))[0])
    # The zero point rounds toward +inf: the code window then never overshoots
    # the fitted range by more than one step at either end, which keeps the
    # in-range reconstruction error at or below one scale unit.
    zero = -math.ceil((float(xmax) + float(xmin)) / (2.0 * scale))
    return QuantParams(scale=scale, zero_point=int(zero), bits=int(bits))


def quantize(x, p: QuantParams):
    """Map float value(s) onto the k-bit signed grid. Clamping absorbs
    out-of-range inputs, so this never raises for finite x."""
    arr = np.asarray(x, dtype=np.float64)
    q = np.clip(np.rint(arr / p.scale) + p.zero_point, p.qmin, p.qmax).astype(np.int64)
    return int(q) if q.ndim == 0 else q


def dequantize(xq, p: QuantParams):
    """Reconstruct float value(s): x^ = s * (q - z)."""
    arr = np.asarray(xq, dtype=np.float64)
    out = p.scale * (arr - p.zero_point)
    return float(out) if out.ndim == 0 else out


def minmax_scale_zero(mins: np.ndarray, maxs: np.ndarray, bits: int):
    """Vectorized Min-Max fit: arrays of per-group (scale, zero point)."""
    mins = np.asarray(mins, dtype=np.float64)
    maxs = np.asarray(maxs, dtype=np.float64)
    if np.any(mins > maxs):
        raise ValidationError("min > max in at least one group")
    scales = _scale_as_f32(np.maximum((maxs - mins) / 2.0**bits, EPS_SCALE))
    zeros = -np.ceil((maxs + mins) / (2.0 * scales)).astype(np.int64)
    return scales, zeros


def quantize_array(x: np.ndarray, scale, zero, bits: int) -> np.ndarray:
    """Broadcasting form of `quantize` (int64 codes)."""
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    q = np.rint(np.asarray(x, dtype=np.float64) / scale) + zero
    return np.clip(q, lo, hi).astype(np.int64)


def dequantize_array(q: np.ndarray, scale, zero) -> np.ndarray:
    return np.asarray(scale, dtype=np.float64) * (np.asarray(q, dtype=np.float64) - zero)
