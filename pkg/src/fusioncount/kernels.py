"""Backend selection for the data-movement kernels.

The compiled extension is used when it imports; setting
``FUSIONCOUNT_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _fallback

if os.environ.get("FUSIONCOUNT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2x2 = _impl.maxpool2x2
maxpool2x2_backward = _impl.maxpool2x2_backward
upsample2x = _impl.upsample2x
upsample2x_backward = _impl.upsample2x_backward

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool2x2",
    "maxpool2x2_backward",
    "upsample2x",
    "upsample2x_backward",
]
