"""Pure-numpy fallback kernels.

Operation order matches ssm_ptq._kernels exactly (per-step elementwise update,
state-axis reduction in ascending order), so both backends produce bit-identical
float32 results.
"""

from __future__ import annotations

import numpy as np


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def selective_scan(a_bar, b_bar, c_t, u, d, h0=None):
    """Run h_t = A̅_t ⊙ h_{t-1} + B̅_t ⊙ u_t; y_t = Σ_s C_t[s] h_t[:, s] + D ⊙ u_t.

    a_bar, b_bar: [T, E, S]; c_t: [T, S]; u: [T, E]; d: [E]; h0: [E, S] or None.
    Returns (y [T, E], h_T [E, S]).
    """
    a_bar = _f32(a_bar)
    b_bar = _f32(b_bar)
    c_t = _f32(c_t)
    u = _f32(u)
    d = _f32(d)
    n_steps, n_chan, n_state = a_bar.shape
    h = np.zeros((n_chan, n_state), dtype=np.float32) if h0 is None else _f32(h0).copy()
    y = np.empty((n_steps, n_chan), dtype=np.float32)
    for t in range(n_steps):
        h = a_bar[t] * h + b_bar[t] * u[t][:, None]
        acc = np.zeros(n_chan, dtype=np.float32)
        for s in range(n_state):
            acc = acc + h[:, s] * c_t[t, s]
        y[t] = acc + d * u[t]
    return y, h


def causal_conv1d(x, kernel):
    """Depthwise causal conv of [T, C] with [K, C], zero-padded on the left."""
    x = _f32(x)
    kernel = _f32(kernel)
    n_steps = x.shape[0]
    n_taps = kernel.shape[0]
    y = np.zeros_like(x)
    for j in range(n_taps):
        shift = n_taps - 1 - j
        if shift == 0:
            y += kernel[j] * x
        elif shift < n_steps:
            y[shift:] += kernel[j] * x[: n_steps - shift]
    return y
