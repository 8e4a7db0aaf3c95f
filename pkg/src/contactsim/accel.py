"""Optional numba acceleration.

Hot kernels are written once in plain numpy-compatible Python and compiled
with numba when it is importable.  Setting the environment variable
CONTACTSIM_DISABLE_NUMBA=1 before import forces the interpreted fallback,
which is useful for debugging and for benchmarking the compiled speedup.
"""

import os

NUMBA_ENABLED = False

if os.environ.get("CONTACTSIM_DISABLE_NUMBA", "0") != "1":
    try:
        import numba

        NUMBA_ENABLED = True
    except ImportError:
        numba = None
else:
    numba = None


def njit(*args, **kwargs):
    """numba.njit when acceleration is on, identity decorator otherwise."""
    if NUMBA_ENABLED:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(func):
        return func

    return wrap
