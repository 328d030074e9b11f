"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension ``_ckernels`` is used when it imports cleanly. Set
``FUSION_PILOT_KERNELS=python`` to force the numpy implementation, e.g. to
compare the two or on machines without a C compiler.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FUSION_PILOT_KERNELS", "auto").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels



# The compiled kernels take C-ordered memoryviews; views and Fortran-ordered
# arrays are copied here so both backends accept the same inputs.
def im2col(xp, kh, kw, stride, ho, wo):
    return _impl.im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)


def col2im(dcols, hp, wp, stride):
    return _impl.col2im(np.ascontiguousarray(dcols), hp, wp, stride)


def median_filter(img, k):
    return _impl.median_filter(np.ascontiguousarray(img, dtype=np.float64), k)


def inpaint_diffuse(values, missing, tol, max_iter):
    return _impl.inpaint_diffuse(values, missing, tol, max_iter)


__all__ = ["BACKEND", "im2col", "col2im", "median_filter", "inpaint_diffuse"]
