"""Symmetric absmax quantization.

Scale s_x = (2^(n-1) - 1) / max|x|; values are round-half-to-even of s_x * x,
clamped to the symmetric range +/-(2^(n-1) - 1). A zero absmax degenerates to
scale 1 with all-zero values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"

# i32 accumulation in int_matmul is overflow-safe up to this inner dimension.
MAX_INT_MATMUL_K = 1 << 15


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QuantScheme:
    bits: int
    granularity: str = PER_TENSOR
    axis: int | None = None

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ConfigError(f"unsupported bit width {self.bits} (expected 4 or 8)")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if (self.granularity == PER_CHANNEL) != (self.axis is not None):
            raise ConfigError("per_channel requires an axis; per_tensor forbids one")


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray  # int8 storage (i4 values sign-extended, one per byte)
    scales: np.ndarray  # f32 scalar (0-d) or per-channel vector
    scheme: QuantScheme

    def __post_init__(self):
        limit = qmax(self.scheme.bits)
        values = np.ascontiguousarray(self.values, dtype=np.int8)
        scales = np.asarray(self.scales, dtype=np.float32)
        if values.size and (values.min() < -limit or values.max() > limit):
            raise DataError(f"quantized values exceed +/-{limit}")
        if scales.size and scales.min() <= 0:
            raise DataError("quantization scales must be positive")
        if self.scheme.granularity == PER_CHANNEL:
            if scales.shape != (values.shape[self.scheme.axis],):
                raise ShapeError(
                    f"per-channel scales {scales.shape} do not match axis "
                    f"{self.scheme.axis} of values {values.shape}"
                )
        elif scales.ndim != 0:
            raise ShapeError("per-tensor quantization requires a scalar scale")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scales", scales)

    @property
    def dtype(self) -> str:
        return "i4" if self.scheme.bits == 4 else "i8"

    def transpose(self) -> "QuantizedTensor":
        """Transpose a rank-2 quantized tensor, tracking the channel axis."""
        if self.values.ndim != 2:
            raise ShapeError(f"transpose expects rank-2 values, got {self.values.shape}")
        scheme = self.scheme
        if scheme.granularity == PER_CHANNEL:
            scheme = QuantScheme(scheme.bits, PER_CHANNEL, axis=1 - scheme.axis)
        return QuantizedTensor(self.values.T.copy(), self.scales, scheme)


def _check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.size and not np.isfinite(x).all():
        raise DataError("cannot quantize a tensor containing NaN or Inf")
    return x


def _quantize_with_scale(x: np.ndarray, scale: np.ndarray, bits: int) -> np.ndarray:
    limit = qmax(bits)
    scaled = np.rint(x * scale).astype(np.float32)
    return np.clip(scaled, -limit, limit).astype(np.int8)


def absmax_scale(x: np.ndarray, bits: int) -> np.float32:
    """Eq.-style scalar scale; 1.0 for an all-zero tensor."""
    peak = np.float32(np.max(np.abs(x))) if x.size else np.float32(0.0)
    if peak == 0.0:
        return np.float32(1.0)
    return np.float32(qmax(bits)) / peak


def quantize_per_tensor(x: np.ndarray, bits: int) -> QuantizedTensor:
    x = _check_finite(x)
    scale = absmax_scale(x, bits)
    return QuantizedTensor(
        _quantize_with_scale(x, scale, bits), np.float32(scale), QuantScheme(bits)
    )


def quantize_per_channel(w: np.ndarray, bits: int) -> QuantizedTensor:
    """One scale per output row of a rank-2 [out x in] weight."""
    w = _check_finite(w)
    if w.ndim != 2:
        raise ShapeError(f"quantize_per_channel expects rank-2 weight, got {w.shape}")
    peaks = np.abs(w).max(axis=1)
    safe = np.where(peaks == 0.0, np.float32(1.0), peaks)
    scales = np.where(peaks == 0.0, np.float32(1.0), np.float32(qmax(bits)) / safe).astype(
        np.float32
    )
    values = _quantize_with_scale(w, scales[:, None], bits)
    return QuantizedTensor(values, scales, QuantScheme(bits, PER_CHANNEL, axis=0))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    values = q.values.astype(np.float32)
    if q.scheme.granularity == PER_TENSOR:
        return values / q.scales
    shape = [1] * values.ndim
    shape[q.scheme.axis] = -1
    return values / q.scales.reshape(shape)


def fake_quant(x: np.ndarray, scheme: "QuantScheme | int") -> np.ndarray:
    """Quantize-then-dequantize with a scale from the tensor itself."""
    if isinstance(scheme, int):
        scheme = QuantScheme(scheme)
    if scheme.granularity == PER_TENSOR:
        return dequantize(quantize_per_tensor(x, scheme.bits))
    if scheme.axis != 0:
        raise ConfigError("per-channel fake_quant supports axis 0 only")
    return dequantize(quantize_per_channel(x, scheme.bits))


def fake_quant_static(x: np.ndarray, scale: float, bits: int) -> np.ndarray:
    """Quantize-then-dequantize with a fixed (calibrated) per-tensor scale.

    Values beyond the calibrated range clamp to the symmetric integer range.
    """
    x = _check_finite(x)
    scale = np.float32(scale)
    if scale <= 0:
        raise DataError("static fake-quant scale must be positive")
    return _quantize_with_scale(x, scale, bits).astype(np.float32) / scale


def int_matmul(xq: QuantizedTensor, wq: QuantizedTensor) -> np.ndarray:
    """Integer matmul [m x k] @ [k x n] with i32 accumulation, rescaled to f32.

    xq must be per-tensor; wq per-tensor or per-channel along its output axis
    (axis 1 of the [k x n] layout).
    """
    if xq.scheme.granularity != PER_TENSOR:
        raise ConfigError("int_matmul requires a per-tensor quantized activation")
    if xq.values.ndim != 2 or wq.values.ndim != 2:
        raise ShapeError(
            f"int_matmul expects rank-2 operands, got {xq.values.shape} and {wq.values.shape}"
        )
    k = xq.values.shape[1]
    if wq.values.shape[0] != k:
        raise ShapeError(f"int_matmul inner dimensions differ: {xq.values.shape} vs {wq.values.shape}")
    if k > MAX_INT_MATMUL_K:
        raise DataError(f"int_matmul inner dimension {k} exceeds the i32-safe bound {MAX_INT_MATMUL_K}")
    if wq.scheme.granularity == PER_CHANNEL and wq.scheme.axis != 1:
        raise ConfigError("int_matmul expects per-channel weight scales along the output axis")
    acc = np.matmul(xq.values.astype(np.int32), wq.values.astype(np.int32))
    denom = (xq.scales * wq.scales).astype(np.float32)
    return acc.astype(np.float32) / denom
