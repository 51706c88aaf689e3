"""Optional numba acceleration.

Kernels are written once as plain Python/numpy-compatible loops and compiled
with ``numba.njit`` when numba is importable and ``UDA_LAB_NUMBA`` is not set
to ``0``. With the flag off every kernel runs through its pure-numpy twin.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("UDA_LAB_NUMBA", "1").strip().lower()

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba if enabled; otherwise return it unchanged."""
    if not NUMBA_AVAILABLE:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
