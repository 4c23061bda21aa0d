"""Harris flows, their joinings, dual diffusion semigroups and spectral sets."""

import os

__version__ = "0.1.0"


def _pick_threading_layer():
    import numba

    # the bundled TBB is often too old; skip probing it unless asked for
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"


def apply_thread_cap(value=None):
    """Cap numba's worker count from ``HARRIS_THREADS`` (or ``value``)."""
    import numba

    raw = value if value is not None else os.environ.get("HARRIS_THREADS")
    if raw in (None, ""):
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"HARRIS_THREADS must be a positive integer, got {raw!r}")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()


_pick_threading_layer()
apply_thread_cap()
