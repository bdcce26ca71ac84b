"""Numba toggle.

Set ``STACKDYN_DISABLE_NUMBA=1`` to force the pure-numpy kernels (also used
automatically when numba is not importable).  The flag is read once, at
import time of :mod:`stackdyn.kernels`.
"""

from __future__ import annotations

import os

_FALSY = {"", "0", "false", "no", "off"}


def numba_requested() -> bool:
    return os.environ.get("STACKDYN_DISABLE_NUMBA", "0").strip().lower() in _FALSY


try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and numba_requested()


def njit(func):
    """``numba.njit(cache=True)`` when numba is available, identity otherwise."""
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True)(func)
