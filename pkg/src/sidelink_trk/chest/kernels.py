"""Backend selection for the ALS sweep loop.

The compiled extension is used when it imports; ``SIDELINK_TRK_PURE=1``
forces the NumPy reference.
"""

import os

from . import _als_py

try:
    if os.environ.get("SIDELINK_TRK_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _als_core as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def als_run(Y, A, B, C, max_iters, tol, ridge, backend=None):
    backend = backend or BACKEND
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled ALS extension is not available")
        return _compiled.als_run(Y, A, B, C, max_iters, tol, ridge)
    return _als_py.als_run(Y, A, B, C, max_iters, tol, ridge)


def available_backends():
    return ["python"] + (["compiled"] if _compiled is not None else [])
