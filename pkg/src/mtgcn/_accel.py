"""Numba switch.

Set ``MTGCN_DISABLE_NUMBA=1`` to run every kernel on its numpy / interpreted
path. ``MTGCN_NUM_THREADS`` caps numba's worker pool.
"""

from __future__ import annotations

import os

_FALSY = {"", "0", "false", "no", "off"}


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() not in _FALSY


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _flag("MTGCN_DISABLE_NUMBA")

if USE_NUMBA and os.environ.get("MTGCN_NUM_THREADS"):
    numba.set_num_threads(int(os.environ["MTGCN_NUM_THREADS"]))


def njit(fn):
    """Compile ``fn`` unless numba is off; ``fn.py_func`` is always the raw function."""
    if not USE_NUMBA:
        fn.py_func = fn
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
