"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise (or when
``SURFRECON_PURE_PYTHON=1``) the pure-Python twin is used. Both backends expose
``KDTree`` and ``linear_assignment`` with identical results.
"""
import os

from . import _kernels_py

if os.environ.get("SURFRECON_PURE_PYTHON", "") not in ("", "0"):
    _backend = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _backend
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _backend = _kernels_py
        BACKEND = "python"

KDTree = _backend.KDTree
linear_assignment = _backend.linear_assignment

__all__ = ["BACKEND", "KDTree", "linear_assignment"]
