"""Kernel backend selection.

The convolution kernels exist twice: a numba ``@njit`` version and a pure
numpy version. ``VOXPEFT_BACKEND`` picks one at import time:

    VOXPEFT_BACKEND=numba   use numba, fail loudly if it is not importable
    VOXPEFT_BACKEND=numpy   force the pure-numpy path
    (unset / "auto")        use numba when available, else numpy

Both backends produce results that agree to float64 round-off; within one
backend results are bitwise reproducible.
"""

import os

_REQUESTED = os.environ.get("VOXPEFT_BACKEND", "auto").strip().lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"VOXPEFT_BACKEND must be auto|numba|numpy, got {_REQUESTED!r}")

NUMBA_AVAILABLE = False
if _REQUESTED != "numpy":
    try:
        import numba  # noqa: F401

        NUMBA_AVAILABLE = True
    except ImportError:
        if _REQUESTED == "numba":
            raise RuntimeError("VOXPEFT_BACKEND=numba but numba is not installed")

USE_NUMBA = NUMBA_AVAILABLE and _REQUESTED != "numpy"
BACKEND = "numba" if USE_NUMBA else "numpy"
