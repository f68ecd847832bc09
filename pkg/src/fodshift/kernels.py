"""Kernel backend selection.

The compiled extension is used when it imports; ``FODSHIFT_PURE_PYTHON=1``
forces the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FODSHIFT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

nnls = _impl.nnls
local_maxima = _impl.local_maxima
adam_update = _impl.adam_update
ldp = _impl.ldp

__all__ = ["BACKEND", "nnls", "ldp", "local_maxima", "adam_update"]
