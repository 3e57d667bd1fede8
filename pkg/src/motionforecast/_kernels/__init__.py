"""Quaternion kernel selection.

Imports the compiled Cython kernels when built, otherwise the numpy
fallback. Set MOTIONFORECAST_PURE=1 to force the fallback (used by the
benchmark and for debugging).
"""

import os

if os.environ.get("MOTIONFORECAST_PURE") == "1":
    from motionforecast._kernels import _quatcore_py as quatcore
else:
    try:
        from motionforecast._kernels import _quatcore as quatcore  # type: ignore[attr-defined]
    except ImportError:
        from motionforecast._kernels import _quatcore_py as quatcore

__all__ = ["quatcore"]
