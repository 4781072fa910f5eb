"""Optional numba acceleration.

Hot kernels are written once as plain Python loops and compiled with
``njit`` when numba is importable and ``SWBT_NUMBA`` is not ``"0"``.
Every kernel module also carries a vectorised numpy twin; ``ENABLED``
decides which one the public wrappers dispatch to.

Set ``SWBT_NUMBA=0`` before import to force the numpy path everywhere.
"""
import os

_FLAG = os.environ.get("SWBT_NUMBA", "1").strip().lower()

try:
    import numba as _numba  # noqa: F401
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships in the dev env
    HAVE_NUMBA = False
    _njit = None

ENABLED = HAVE_NUMBA and _FLAG not in ("0", "false", "off", "no")


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is enabled, else the identity decorator."""
    if not ENABLED:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)


def backend_name() -> str:
    return "numba" if ENABLED else "numpy"
