"""Backend selection for the dense-layer kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``DISTGAN_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
if not os.environ.get("DISTGAN_PURE_PYTHON"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def affine_forward(x, w, b):
    """``x @ w + b`` with a fixed, backend-independent summation order."""
    return _impl.affine_forward(_c(x), _c(w), _c(b))


def affine_backward(x, w, g, need_dx=True):
    """Gradients of an affine map: ``(dL/dw, dL/db, dL/dx or None)``."""
    return _impl.affine_backward(_c(x), _c(w), _c(g), need_dx)


def backends():
    """Map of available backend name -> kernel module."""
    out = {"python": _pykernels}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
