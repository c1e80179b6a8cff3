"""Numba toggle.

Set ``TEMPORAL_SYNTH_NUMBA=0`` to force the pure-numpy kernels. The flag is
read once at import time.
"""
import os

USE_NUMBA = os.environ.get("TEMPORAL_SYNTH_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        import numba  # noqa: F401
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False


def backend():
    return "numba" if USE_NUMBA else "numpy"
