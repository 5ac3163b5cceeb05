"""JIT plumbing: numba when available, scalar fallback otherwise.

Kernels are written once as plain Python and compiled with numba's njit.
Setting ULSNN_NO_JIT=1 (or running without numba installed) selects the
uncompiled scalar-equivalent path: identical operations in identical order,
just slow. Callers pick the active version through ``select()``.
"""

from __future__ import annotations

import os

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def jit_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("ULSNN_NO_JIT", "0") != "1"


def select(dispatcher):
    """Return the compiled kernel, or its pure-Python twin when JIT is off."""
    if jit_enabled():
        return dispatcher
    return getattr(dispatcher, "py_func", dispatcher)
