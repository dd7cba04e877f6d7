"""Optional numba acceleration.

Set ``MAVPLAN_DISABLE_NUMBA=1`` to run every kernel as plain Python over
numpy arrays. Both paths share the same source, so results are identical.
"""

import os

_FLAG = os.environ.get("MAVPLAN_DISABLE_NUMBA", "").strip().lower()
DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if DISABLED:
        raise ImportError
    from numba import njit as _njit

    NUMBA_ENABLED = True
except ImportError:
    _njit = None
    NUMBA_ENABLED = False


def jit(func=None, **options):
    """``numba.njit`` when available and enabled, identity otherwise."""
    opts = {"cache": True}
    opts.update(options)

    def wrap(f):
        if not NUMBA_ENABLED:
            return f
        return _njit(**opts)(f)

    if func is not None:
        return wrap(func)
    return wrap
