"""Hot forward-only kernels with two interchangeable backends.

The numba backend JIT-compiles per-ray loops; the numpy backend runs the
same algorithms vectorized. Both produce identical results (candidate sets
and ray-traced images), so the choice is purely about speed. Selection:

    PHONG_SPLAT_NUMBA=1     force numba (error if unavailable)
    PHONG_SPLAT_NUMBA=0     force the numpy fallback
    unset / auto            numba when importable, else numpy

`benchmarks/kernel_bench.py` times one backend against the other.
"""

import os

from . import npy as numpy_backend

try:
    from . import nb as numba_backend
    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba_backend = None
    _HAS_NUMBA = False


def _select():
    flag = os.environ.get("PHONG_SPLAT_NUMBA", "auto").lower()
    if flag in ("0", "false", "off"):
        return numpy_backend, "numpy"
    if flag in ("1", "true", "on"):
        if not _HAS_NUMBA:
            raise RuntimeError("PHONG_SPLAT_NUMBA=1 but numba is not importable")
        return numba_backend, "numba"
    if _HAS_NUMBA:
        return numba_backend, "numba"
    return numpy_backend, "numpy"


_backend, BACKEND_NAME = _select()

segment_hits = _backend.segment_hits
trace_rays = _backend.trace_rays


def backend(name: str):
    """Explicit backend module by name (used by tests and the benchmark)."""
    if name == "numpy":
        return numpy_backend
    if name == "numba":
        if not _HAS_NUMBA:
            raise RuntimeError("numba backend unavailable")
        return numba_backend
    raise ValueError(f"unknown backend {name!r}")
