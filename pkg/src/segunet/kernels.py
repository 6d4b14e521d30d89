"""Kernel backend selection.

The compiled extension is used when importable; ``SEGUNET_PURE_PYTHON=1``
forces the NumPy fallback.
"""

import os

from ._ext import fallback

if os.environ.get("SEGUNET_PURE_PYTHON", "").strip() not in ("", "0"):
    _impl = fallback
else:
    try:
        from ._ext import _kernels as _impl
    except ImportError:
        _impl = fallback

BACKEND = "python" if _impl is fallback else "cython"

emeasure_curve = _impl.emeasure_curve
nearest_foreground = _impl.nearest_foreground
