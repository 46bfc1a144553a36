"""Backend selection for the numeric kernels.

Kernels exist twice: a numba ``@njit`` loop version and a vectorised numpy
version.  Set ``POLYPDIFF_NUMBA=0`` to force the numpy path (the numba path is
also skipped when numba cannot be imported).
"""
from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None
    HAVE_NUMBA = False


def _flag_enabled(value: str | None) -> bool:
    if value is None:
        return True
    return value.strip().lower() not in {"0", "false", "no", "off"}


USE_NUMBA = HAVE_NUMBA and _flag_enabled(os.environ.get("POLYPDIFF_NUMBA"))


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
