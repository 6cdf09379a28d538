"""numba switch.

Hot kernels are written in the numpy subset numba understands and decorated
with :func:`kernel`. Setting ``LFBM_DISABLE_NUMBA=1`` (or running without
numba installed) leaves them as plain Python/numpy functions; results agree
with the compiled path to rounding.
"""
import os

_FLAG = os.environ.get("LFBM_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def kernel(fn):
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def backend():
    return "numba" if USE_NUMBA else "numpy"
