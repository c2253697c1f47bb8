"""Backend selection for the hot kernels.

``SE3NETS_BACKEND`` selects the implementation:

* ``auto`` (default): numba for the per-pixel loops (ray casting, association
  corruption), BLAS-backed numpy for convolutions, which benchmarks faster.
* ``numba``: numba everywhere.
* ``numpy``: pure numpy everywhere, no JIT.
"""

import os

_requested = os.environ.get("SE3NETS_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"SE3NETS_BACKEND must be 'auto', 'numba' or 'numpy', got {_requested!r}")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _requested in ("auto", "numba")
USE_NUMBA_CONV = HAVE_NUMBA and _requested == "numba"
BACKEND = _requested if HAVE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
