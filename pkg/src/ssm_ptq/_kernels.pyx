# cython: boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled sequential kernels for the selective-scan recurrence and the
causal depthwise convolution. Compiled with -ffp-contract=off so float32
results are bit-identical to the numpy fallback."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def selective_scan(a_bar, b_bar, c_t, u, d, h0=None):
    """Run h_t = A̅_t ⊙ h_{t-1} + B̅_t ⊙ u_t; y_t = Σ_s C_t[s] h_t[:, s] + D ⊙ u_t.

    a_bar, b_bar: [T, E, S]; c_t: [T, S]; u: [T, E]; d: [E]; h0: [E, S] or None.
    Returns (y [T, E], h_T [E, S]).
    """
    cdef cnp.ndarray[float, ndim=3, mode="c"] A = np.ascontiguousarray(a_bar, dtype=np.float32)
    cdef cnp.ndarray[float, ndim=3, mode="c"] B = np.ascontiguousarray(b_bar, dtype=np.float32)
    cdef cnp.ndarray[float, ndim=2, mode="c"] C = np.ascontiguousarray(c_t, dtype=np.float32)
    cdef cnp.ndarray[float, ndim=2, mode="c"] U = np.ascontiguousarray(u, dtype=np.float32)
    cdef cnp.ndarray[float, ndim=1, mode="c"] D = np.ascontiguousarray(d, dtype=np.float32)

    cdef Py_ssize_t n_steps = A.shape[0]
    cdef Py_ssize_t n_chan = A.shape[1]
    cdef Py_ssize_t n_state = A.shape[2]

    cdef cnp.ndarray[float, ndim=2, mode="c"] H
    if h0 is None:
        H = np.zeros((n_chan, n_state), dtype=np.float32)
    else:
        H = np.ascontiguousarray(h0, dtype=np.float32).copy()
    cdef cnp.ndarray[float, ndim=2, mode="c"] Y = np.empty((n_steps, n_chan), dtype=np.float32)

    cdef float[:, :, ::1] av = A
    cdef float[:, :, ::1] bv = B
    cdef float[:, ::1] cv = C
    cdef float[:, ::1] uv = U
    cdef float[::1] dv = D
    cdef float[:, ::1] hv = H
    cdef float[:, ::1] yv = Y

    cdef Py_ssize_t t, c, s
    cdef float acc, ut

    with nogil:
        for t in range(n_steps):
            for c in range(n_chan):
                ut = uv[t, c]
                for s in range(n_state):
                    hv[c, s] = av[t, c, s] * hv[c, s] + bv[t, c, s] * ut
            for c in range(n_chan):
                acc = 0.0
                for s in range(n_state):
                    acc = acc + hv[c, s] * cv[t, s]
                yv[t, c] = acc + dv[c] * uv[t, c]
    return Y, H


def causal_conv1d(x, kernel):
    """Depthwise causal conv of [T, C] with [K, C], zero-padded on the left."""
    cdef cnp.ndarray[float, ndim=2, mode="c"] X = np.ascontiguousarray(x, dtype=np.float32)
    cdef cnp.ndarray[float, ndim=2, mode="c"] K = np.ascontiguousarray(kernel, dtype=np.float32)

    cdef Py_ssize_t n_steps = X.shape[0]
    cdef Py_ssize_t n_chan = X.shape[1]
    cdef Py_ssize_t n_taps = K.shape[0]
    cdef cnp.ndarray[float, ndim=2, mode="c"] Y = np.empty((n_steps, n_chan), dtype=np.float32)

    cdef float[:, ::1] xv = X
    cdef float[:, ::1] kv = K
    cdef float[:, ::1] yv = Y

    cdef Py_ssize_t t, c, j, idx
    cdef float acc

    with nogil:
        for t in range(n_steps):
            for c in range(n_chan):
                acc = 0.0
                for j in range(n_taps):
                    idx = t - (n_taps - 1 - j)
                    if idx >= 0:
                        acc = acc + kv[j, c] * xv[idx, c]
                yv[t, c] = acc
    return Y
