"""numba switch. Set DEQUANTMC_NO_NUMBA=1 to force the pure-numpy kernels."""

import os

USE_NUMBA = os.environ.get("DEQUANTMC_NO_NUMBA", "0").lower() not in ("1", "true", "yes")

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover
    _njit = None
    USE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, otherwise the identity decorator."""
    if USE_NUMBA and _njit is not None:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
