"""Optional numba acceleration.

Kernels decorated with :func:`maybe_njit` are compiled when numba is importable
and ``LATENTVID_DISABLE_JIT`` is unset (or ``0``). Otherwise the pure-numpy
fallback registered next to each kernel is used.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_flag = os.environ.get("LATENTVID_DISABLE_JIT", "0").strip().lower()
JIT_ENABLED = numba is not None and _flag in ("", "0", "false", "no")


def maybe_njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)


def backend_name():
    return "numba" if JIT_ENABLED else "numpy"
