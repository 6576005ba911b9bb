"""Pick the compiled core when it imports, else the numpy fallback.

Set ``SPATIAL_SIR_BACKEND`` to ``python`` or ``cython`` to force one.
"""
from __future__ import annotations

import os

from . import _pycore

try:
    from . import _ccore
except ImportError:  # extension not built
    _ccore = None

__all__ = ["BACKEND", "available_backends", "get_core"]


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _ccore is not None else [])


def get_core(name: str | None = None):
    """Return the core module for ``name`` (``auto``, ``python`` or ``cython``)."""
    name = (name or os.environ.get("SPATIAL_SIR_BACKEND", "auto")).lower()
    if name == "auto":
        return _ccore if _ccore is not None else _pycore
    if name == "python":
        return _pycore
    if name == "cython":
        if _ccore is None:
            raise ImportError("compiled core is not built; reinstall with Cython available")
        return _ccore
    raise ValueError(f"unknown backend {name!r}")


BACKEND = "cython" if get_core() is not _pycore else "python"
