"""Convolution kernel backend selection.

The backend is fixed at import time from the GAMREID_BACKEND environment
variable: "numba" (JIT, the default when importable), "numpy" (pure
fallback), or "auto". Both backends share the same function contracts, so
callers never branch on the active one.
"""

import os

from ..errors import ConfigError
from . import numpy_backend

_choice = os.environ.get("GAMREID_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ConfigError(
        f"GAMREID_BACKEND must be one of auto, numba, numpy; got {_choice!r}")

if _choice == "numpy":
    _active = numpy_backend
else:
    try:
        from . import numba_backend as _active
    except ImportError:
        if _choice == "numba":
            raise ConfigError(
                "GAMREID_BACKEND=numba but the numba import failed") from None
        _active = numpy_backend

BACKEND = _active.NAME
conv2d_forward = _active.conv2d_forward
conv2d_backward = _active.conv2d_backward

__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward", "numpy_backend"]
