"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
always available. ``CSTYOLO_KERNELS=numpy|native`` forces a backend
(``native`` raises if the extension was not built).
"""

import os

from . import cpu

_requested = os.environ.get("CSTYOLO_KERNELS", "auto")

if _requested == "numpy":
    _impl = cpu
elif _requested in ("auto", "native"):
    try:
        from . import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "native":
            raise ImportError(
                "CSTYOLO_KERNELS=native but the compiled extension is missing; "
                "reinstall the package with a C compiler available"
            )
        _impl = cpu
else:
    raise ValueError(f"unknown kernel backend {_requested!r}")

BACKEND = "numpy" if _impl is cpu else "native"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
