"""Backend selection for the convolution gather/scatter kernels.

The compiled module is preferred. Set ``ARNET_KERNELS=python`` to force the
numpy fallback (used by the benchmark and the cross-backend tests).
"""

import os

from . import _pykernels

python_backend = _pykernels

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("ARNET_KERNELS", "") != "python":
    _impl = compiled_backend
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def im2col(xp, kh, kw, stride, dilation, oh, ow):
    """Unfold padded ``(n, c, hp, wp)`` into ``(n, c*kh*kw, oh*ow)`` patches."""
    return _impl.im2col(xp, kh, kw, stride, dilation, oh, ow)


def col2im(cols, c, hp, wp, kh, kw, stride, dilation, oh, ow):
    """Adjoint of :func:`im2col`: scatter-add patches back into the padded frame."""
    return _impl.col2im(cols, c, hp, wp, kh, kw, stride, dilation, oh, ow)
