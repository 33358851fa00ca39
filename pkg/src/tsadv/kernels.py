"""Hot-kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``TSADV_PURE=1`` to force the numpy path.  ``BACKEND`` names the active one.
"""
import os

from . import _fallback

if os.environ.get("TSADV_PURE", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _ext as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "compiled" if _impl is not _fallback else "numpy"

elman_forward = _impl.elman_forward
elman_backward = _impl.elman_backward
project_l1_rows = _impl.project_l1_rows
rolling_mean_std = _impl.rolling_mean_std
