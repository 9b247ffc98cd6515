"""Hot per-pixel kernels: compiled Cython core with a NumPy fallback.

The backend is picked once at import; `BACKEND` reports which one is live.
Set VOLTERRA_EDIT_NO_CKERNELS=1 to force the NumPy fallback.
"""

import os

from . import _py

if os.environ.get("VOLTERRA_EDIT_NO_CKERNELS"):
    _impl = _py
    BACKEND = "python"
else:
    try:
        from . import _ck as _impl

        BACKEND = "c"
    except ImportError:
        _impl = _py
        BACKEND = "python"

dilate_binary = _impl.dilate_binary
nms_suppress = _impl.nms_suppress
hysteresis_link = _impl.hysteresis_link

__all__ = ["BACKEND", "dilate_binary", "nms_suppress", "hysteresis_link"]
