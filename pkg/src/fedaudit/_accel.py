"""Numba switch.

Hot kernels are written in the numpy subset numba understands.  When numba is
importable and ``FEDAUDIT_DISABLE_NUMBA`` is unset (or "0"), they are compiled
with ``@njit``; otherwise the very same functions run as plain numpy code.
"""
import os

_flag = os.environ.get("FEDAUDIT_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    import numba
except ImportError:
    numba = None

USE_NUMBA = numba is not None


def njit(fn):
    if not USE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend():
    return "numba" if USE_NUMBA else "numpy"
