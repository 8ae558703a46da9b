"""Backend dispatch for the numerical hot kernels.

Set ``HOMOGLAB_BACKEND=numpy`` to force the pure-numpy path (useful when
numba is unavailable or JIT warm-up is unwanted); ``HOMOGLAB_BACKEND=numba``
forces compilation and raises if numba cannot be imported.  Default: numba
when importable, numpy otherwise.
"""

import os

from . import _numpy

_requested = os.environ.get("HOMOGLAB_BACKEND", "").strip().lower()
if _requested not in ("", "numpy", "numba"):
    raise RuntimeError(
        f"HOMOGLAB_BACKEND must be 'numpy' or 'numba', got {_requested!r}"
    )

if _requested == "numpy":
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = _numpy
        BACKEND = "numpy"

csr_matvec = _impl.csr_matvec
trig_eval = _impl.trig_eval
shift_inf = _impl.shift_inf
interp_periodic = _impl.interp_periodic

__all__ = ["BACKEND", "csr_matvec", "trig_eval", "shift_inf", "interp_periodic"]
