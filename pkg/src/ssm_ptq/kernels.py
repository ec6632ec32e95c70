"""Kernel backend selection.

The compiled extension is used when importable; SSM_PTQ_FORCE_PY=1 (or a
missing build) selects the numpy fallback. Both produce bit-identical float32
output; see benchmarks/bench_kernels.py for the speed comparison.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("SSM_PTQ_FORCE_PY"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

selective_scan_kernel = _impl.selective_scan
causal_conv1d_kernel = _impl.causal_conv1d


def backend() -> str:
    """Name of the active kernel backend: "cython" or "python"."""
    return BACKEND
