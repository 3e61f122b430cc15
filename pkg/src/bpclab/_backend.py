"""Kernel backend selection.

Hot loops are compiled with numba when it is importable. Setting the
environment variable ``BPCLAB_NO_NUMBA=1`` forces the pure-numpy path; the
flag is read once at import time.
"""

from __future__ import annotations

import os

_DISABLED = os.environ.get("BPCLAB_NO_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by BPCLAB_NO_NUMBA")
    import numba  # noqa: F401
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in a subprocess
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def backend_name() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
