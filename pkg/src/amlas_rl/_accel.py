"""Numba switch.

Set ``AMLAS_RL_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable.
"""

from __future__ import annotations

import os

DISABLED = os.environ.get("AMLAS_RL_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not DISABLED


def njit(func):
    """Compile ``func`` in nopython mode, or return it untouched without numba."""
    if not HAVE_NUMBA:
        return func
    return _numba.njit(cache=True)(func)
