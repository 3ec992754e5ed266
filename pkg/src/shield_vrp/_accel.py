"""Numba toggle for the hot VRP kernels.

Set ``SHIELD_NUMBA=0`` to run every kernel as plain Python/NumPy.  The same
function bodies are used on both paths, so results are bit-identical.
"""
import os

USE_NUMBA = os.environ.get("SHIELD_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def njit(fn):
    if USE_NUMBA:
        # no fastmath: mask, validator and cost must agree to the last bit
        return numba.njit(cache=True, nogil=True)(fn)
    return fn
