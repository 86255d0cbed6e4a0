"""Hot-kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``ROVIT_PURE_PYTHON=1`` before import to force the numpy path.
``BACKEND`` names the implementation in use.
"""

import os

from . import _kernels_py

if os.environ.get("ROVIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

bilinear_gather = _impl.bilinear_gather
bilinear_scatter = _impl.bilinear_scatter
focal_terms = _impl.focal_terms
