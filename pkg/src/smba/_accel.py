"""Numba switch.

Hot kernels are written in a numpy style that numba can compile. Setting
``SMBA_DISABLE_NUMBA=1`` before import (or running without numba installed)
leaves them as plain Python/numpy functions.
"""
import os

_disabled = os.environ.get("SMBA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False
    _njit = None


def jit(fn=None, **kwargs):
    """``numba.njit(cache=True, nogil=True)`` or the identity decorator."""
    opts = {"cache": True, "nogil": True}
    opts.update(kwargs)

    def wrap(f):
        if HAS_NUMBA:
            return _njit(**opts)(f)
        return f

    if fn is not None:
        return wrap(fn)
    return wrap


BACKEND = "numba" if HAS_NUMBA else "numpy"
