"""Optional numba acceleration with an interpreted fallback.

Hot kernels in this package are written in scalar/loop style using only
``math`` functions and ``Generator.random()`` so that the compiled and the
interpreted path consume the identical RNG stream and produce bit-identical
trajectories.  Set ``KACFLOW_NO_NUMBA=1`` before import to force the
interpreted path (or simply run without numba installed).
"""

import os

_disabled = os.environ.get("KACFLOW_NO_NUMBA", "").strip().lower() in (
    "1", "true", "yes", "on",
)

if not _disabled:
    try:
        from numba import njit as _njit
        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False


def maybe_njit(**jit_kwargs):
    """Decorator factory: ``numba.njit(**jit_kwargs)`` or the identity.

    Usage: ``@maybe_njit(cache=True)``.  The wrapped function must be valid
    interpreted Python; kernels here keep to scalars, preallocated arrays and
    ``rng.random()`` so both paths match bit for bit.
    """
    if NUMBA_ENABLED:
        return _njit(**jit_kwargs)

    def passthrough(fn):
        return fn

    return passthrough
