"""Hot numeric kernels with a selectable backend.

The compiled (numba) backend is used when numba imports cleanly, unless the
environment variable ``BRANCHCONNECT_DISABLE_NUMBA`` is set to a truthy value,
in which case the pure-numpy reference kernels are used.  The choice is made
once at import time.
"""
import os

from . import _numpy

_FLAG = "BRANCHCONNECT_DISABLE_NUMBA"


def _numba_requested():
    return os.environ.get(_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


if _numba_requested():
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _impl = _numpy
        BACKEND = "numpy"
else:
    _impl = _numpy
    BACKEND = "numpy"

out_size = _numpy.out_size
pool_out_size = _numpy.pool_out_size
im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
avgpool_forward = _impl.avgpool_forward
avgpool_backward = _impl.avgpool_backward
sample_without_replacement = _impl.sample_without_replacement

__all__ = [
    "BACKEND", "out_size", "pool_out_size", "im2col", "col2im", "maxpool_forward", "maxpool_backward",
    "avgpool_forward", "avgpool_backward", "sample_without_replacement",
]
