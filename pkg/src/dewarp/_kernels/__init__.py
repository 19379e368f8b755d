"""Sampling kernel backend selection.

The compiled Cython core is used when it was built; otherwise the pure-numpy
fallback takes over. ``DEWARP_PURE_PYTHON=1`` forces the fallback. Both
backends implement the identical contract (see ``_numpy``), so everything
above this layer is backend-agnostic.
"""

import os

from dewarp._kernels import _numpy
from dewarp._kernels._numpy import MODE_CLAMP, MODE_EXTRAPOLATE, MODE_FILL

try:
    from dewarp._kernels import _core
except ImportError:
    _core = None

if _core is not None and not os.environ.get("DEWARP_PURE_PYTHON"):
    _impl = _core
    BACKEND = "compiled"
else:
    _impl = _numpy
    BACKEND = "numpy"

sample_map = _impl.sample_map
sample_map_grad = _impl.sample_map_grad


def active_backend():
    """Name of the kernel backend selected at import ('compiled' or 'numpy')."""
    return BACKEND
