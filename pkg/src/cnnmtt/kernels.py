"""Backend selection for the rasterization kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Setting ``CNNMTT_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _core_py

if os.environ.get("CNNMTT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _core_py
else:
    try:
        from . import _core as _impl
    except ImportError:  # extension not built
        _impl = _core_py

BACKEND = "cython" if _impl is not _core_py else "python"

splat_gaussian = _impl.splat_gaussian
splat_range_bearing = _impl.splat_range_bearing

__all__ = ["BACKEND", "splat_gaussian", "splat_range_bearing"]
