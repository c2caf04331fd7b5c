"""Hot inner loops with a compiled backend and a numpy fallback.

The compiled module is used when it was built at install time. Set
``MIDGET_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from midget import _pykernels

if os.environ.get("MIDGET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from midget import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"


def nearest_code(e: np.ndarray, codes: np.ndarray, backend=None) -> np.ndarray:
    """Row-wise nearest neighbour in squared Euclidean distance, ties to the lowest index."""
    impl = _select(backend)
    e = np.ascontiguousarray(e, dtype=np.float64)
    codes = np.ascontiguousarray(codes, dtype=np.float64)
    if e.ndim != 2 or codes.ndim != 2 or e.shape[1] != codes.shape[1]:
        raise ValueError(f"channel mismatch: rows {e.shape} vs codes {codes.shape}")
    if codes.shape[0] == 0:
        raise ValueError("empty codebook")
    return impl.nearest_code(e, codes)


def speed_minima(speed: np.ndarray, backend=None) -> np.ndarray:
    """Interior strict local minima of a curve; plateaus report their earliest frame."""
    impl = _select(backend)
    return impl.speed_minima(np.ascontiguousarray(speed, dtype=np.float64))


def nearest_distance(src: np.ndarray, sorted_targets: np.ndarray, backend=None) -> np.ndarray:
    impl = _select(backend)
    return impl.nearest_distance(
        np.ascontiguousarray(src, dtype=np.float64),
        np.ascontiguousarray(sorted_targets, dtype=np.float64),
    )


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from midget import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {backend!r}")
