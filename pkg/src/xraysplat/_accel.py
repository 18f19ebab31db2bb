"""JIT selection.

Hot loops ship in two flavours: a numba ``@njit`` kernel and a pure-numpy
path.  Set ``XRAYSPLAT_DISABLE_JIT=1`` (or uninstall numba) to force numpy.
"""
import os
import warnings

DISABLE_JIT = os.environ.get("XRAYSPLAT_DISABLE_JIT", "0").lower() in ("1", "true", "yes")

try:
    import numba

    # TBB in some images is too old; workqueue needs no external runtime
    if os.environ.get("NUMBA_THREADING_LAYER") is None:
        numba.config.THREADING_LAYER = "workqueue"
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False
    if not DISABLE_JIT:
        warnings.warn("numba not installed; falling back to numpy kernels", RuntimeWarning)

USE_NUMBA = HAVE_NUMBA and not DISABLE_JIT


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("fastmath", False)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda f: f


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def set_num_threads(n):
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
