"""Backend selection for the hot numeric kernels.

Set ``ECMCMC_NUMBA=0`` to force the pure-numpy path. Numba is used when it is
importable and the flag is unset or truthy.
"""

import os

try:
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    NUMBA_AVAILABLE = False


def _flag_enabled(value):
    return value.strip().lower() not in {"0", "false", "no", "off", ""}


USE_NUMBA = NUMBA_AVAILABLE and _flag_enabled(os.environ.get("ECMCMC_NUMBA", "1"))


def njit(func):
    """Compile ``func`` with numba if available, else return it unchanged."""
    if _njit is None:
        return func
    return _njit(cache=True)(func)
