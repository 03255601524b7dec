"""Backend selection for the compiled kernels.

Set ``TCMCAP_DISABLE_NUMBA=1`` to force the pure-numpy paths even when numba
is importable. The flag is read once at import time; ``use_numba`` lets tests
and benchmarks flip it afterwards.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_enabled = HAVE_NUMBA and os.environ.get("TCMCAP_DISABLE_NUMBA", "").strip().lower() in _FALSY


def numba_enabled():
    return _enabled


def use_numba(flag):
    """Switch backends at runtime. Returns the previous setting."""
    global _enabled
    prev = _enabled
    if flag and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _enabled = bool(flag)
    return prev


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, identity otherwise.

    The decorated object always keeps the plain Python function reachable as
    ``.py_func`` so the numpy backend never needs numba.
    """
    kwargs.setdefault("cache", True)

    def wrap(fn):
        if numba is None:
            fn.py_func = fn
            return fn
        return numba.njit(**kwargs)(fn)

    if args and callable(args[0]):
        return wrap(args[0])
    return wrap
