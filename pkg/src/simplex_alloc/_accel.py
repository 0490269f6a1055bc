"""Numba switch.

Set ``SIMPLEX_ALLOC_DISABLE_NUMBA=1`` before import to route every kernel
through its pure-numpy twin. Useful for debugging and for the benchmark.
"""
import os

DISABLE_ENV = "SIMPLEX_ALLOC_DISABLE_NUMBA"


def numba_requested() -> bool:
    return os.environ.get(DISABLE_ENV, "0").strip().lower() not in ("1", "true", "yes")


try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``; identity decorator when numba is absent."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)
