"""Numba switch.

Kernels are compiled with numba when it is importable, unless the
environment variable ``SQDISK_NUMBA`` is set to ``0``. Both code paths
are always importable so they can be compared against each other.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("SQDISK_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` in nopython mode, or return it unchanged without numba."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)
