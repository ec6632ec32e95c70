"""Dense float32 tensor primitives for the Mamba block.

All activations are time-major [T x C]; every op computes and accumulates in
float32. Inputs may be any float dtype but are converted, so results are
reproducible across backends.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError
from .kernels import causal_conv1d_kernel

RMSNORM_EPS = 1e-5


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product [m x k] @ [k x n] with float32 accumulation."""
    a = _f32(a)
    b = _f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    return np.matmul(a, b)


def softplus(x: np.ndarray) -> np.ndarray:
    """Overflow-safe ln(1 + e^x): x for x > 20, e^x for x < -20."""
    x = _f32(x)
    mid = np.log1p(np.exp(np.clip(x, -20.0, 20.0), dtype=np.float32))
    return np.where(x > 20.0, x, np.where(x < -20.0, np.exp(np.minimum(x, 0.0)), mid)).astype(
        np.float32
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = _f32(x)
    pos = 1.0 / (1.0 + np.exp(-np.abs(x), dtype=np.float32))
    return np.where(x >= 0.0, pos, 1.0 - pos).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    """Elementwise x * sigmoid(x) (the gate nonlinearity)."""
    x = _f32(x)
    return x * sigmoid(x)


def exp(x: np.ndarray) -> np.ndarray:
    return np.exp(_f32(x), dtype=np.float32)


def neg(x: np.ndarray) -> np.ndarray:
    return -_f32(x)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _f32(a), _f32(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return a + b


def mul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Hadamard product; a rank-1 [C] operand broadcasts over the time axis."""
    x, y = _f32(x), _f32(y)
    if x.shape == y.shape:
        return x * y
    if x.ndim == 2 and y.ndim == 1 and x.shape[1] == y.shape[0]:
        return x * y[None, :]
    if y.ndim == 2 and x.ndim == 1 and y.shape[1] == x.shape[0]:
        return y * x[None, :]
    raise ShapeError(f"mul shapes incompatible: {x.shape} vs {y.shape}")


def channel_absmax(x: np.ndarray) -> np.ndarray:
    """Per-channel max |x[t, c]| over the time axis of a [T x C] activation."""
    x = _f32(x)
    if x.ndim != 2:
        raise ShapeError(f"channel_absmax expects [T x C], got {x.shape}")
    if x.shape[0] == 0:
        raise DataError("channel_absmax: empty time axis")
    return np.abs(x).max(axis=0)


def rmsnorm(x: np.ndarray, scale: np.ndarray, eps: float = RMSNORM_EPS) -> np.ndarray:
    """RMS normalization over the channel axis with a learned scale."""
    x = _f32(x)
    scale = _f32(scale)
    if x.ndim != 2 or scale.ndim != 1 or x.shape[1] != scale.shape[0]:
        raise ShapeError(f"rmsnorm shapes incompatible: {x.shape} vs {scale.shape}")
    ms = np.mean(np.square(x), axis=1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + np.float32(eps))) * scale[None, :]


def causal_conv1d(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Depthwise causal convolution of [T x C] with a [K x C] kernel.

    The input is zero-padded on the left, so out[t] depends only on x[<= t].
    """
    x = _f32(x)
    kernel = _f32(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"causal_conv1d expects rank-2 inputs, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"causal_conv1d channel mismatch: {x.shape} vs {kernel.shape}")
    return causal_conv1d_kernel(x, kernel)
