"""Convolution kernel backend selection.

The compiled extension is used when it imports; otherwise the NumPy
implementation is used. Set ``VEHSEARCH_KERNELS=python`` to force the
fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im

if os.environ.get("VEHSEARCH_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _ext
    except ImportError:
        pass
    else:
        im2col = _ext.im2col
        col2im = _ext.col2im
        BACKEND = "cython"
