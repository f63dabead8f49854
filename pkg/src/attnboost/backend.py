"""Kernel backend selection: compiled extension if built, numpy otherwise.

Set ``ATTNBOOST_BACKEND=python`` to force the fallback (used by the
benchmark and the backend-agreement tests).
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("ATTNBOOST_BACKEND", "").lower() == "python":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

fused_batch_step = _impl.fused_batch_step


def backend_name() -> str:
    return BACKEND
