"""Backend selection for the hot kernels.

Every kernel module ships two implementations: a numba ``@njit`` loop and a
pure-numpy fallback.  The numba path is used when numba imports cleanly and
``NEUROMAMBA_DISABLE_JIT`` is unset (or ``0``).  ``set_backend`` switches at
runtime, which the tests and the benchmark use to exercise both paths.
"""
from __future__ import annotations

import os

try:
    import numba
    from numba import njit as _numba_njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

BACKENDS = ("numba", "numpy")


def _default_backend() -> str:
    flag = os.environ.get("NEUROMAMBA_DISABLE_JIT", "0").strip().lower()
    if not HAVE_NUMBA or flag not in ("", "0", "false", "no"):
        return "numpy"
    return "numba"


_backend = _default_backend()


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    return _numba_njit(*args, **kwargs)


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    previous, _backend = _backend, name
    return previous


def use_jit() -> bool:
    return _backend == "numba"
