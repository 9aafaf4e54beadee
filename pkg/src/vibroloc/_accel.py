"""Acceleration backend selection.

The hot kernels in kernels.py exist in two twin implementations: a numba
@njit loop version and a pure-numpy version. Which one the public entry
points dispatch to is decided once at import time:

  * VIBROLOC_NO_NUMBA=1 (or "true"/"yes") forces the numpy path;
  * otherwise numba is used when importable, numpy when not.

Both twins stay importable regardless of the flag so tests and the
benchmark can compare them directly.
"""
from __future__ import annotations

import os

ENV_FLAG = "VIBROLOC_NO_NUMBA"


def _flag_set() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() in ("1", "true", "yes")


try:
    from numba import njit as _njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and not _flag_set()


def jit(func):
    """Compile func with numba when available, else return it unchanged."""
    if HAVE_NUMBA:
        return _njit(cache=True)(func)
    return func
