"""Kernel backend selection.

Two interchangeable implementations of build_systems exist: the compiled
longfuse._core extension and the pure-numpy fallback. Selection order is
an explicit argument, then the LONGFUSE_BACKEND environment variable,
then "auto" (compiled when built, numpy otherwise).
"""

from __future__ import annotations

import os

from ..errors import LongfuseError
from . import numpy_backend

ENV_VAR = "LONGFUSE_BACKEND"


def _load_compiled():
    try:
        from .. import _core
    except ImportError:
        return None
    return _core


def available() -> dict[str, bool]:
    return {"numpy": True, "cython": _load_compiled() is not None}


def get_backend(name: str | None = None):
    """Resolve a backend by name ("auto", "numpy", "cython", or None to
    consult LONGFUSE_BACKEND)."""
    if name is None:
        name = os.environ.get(ENV_VAR, "auto")
    name = name.lower()
    if name == "auto":
        compiled = _load_compiled()
        return compiled if compiled is not None else numpy_backend
    if name == "numpy":
        return numpy_backend
    if name == "cython":
        compiled = _load_compiled()
        if compiled is None:
            raise LongfuseError(
                "compiled backend requested but longfuse._core is not "
                "built; reinstall with a C toolchain or use "
                f"{ENV_VAR}=numpy")
        return compiled
    raise LongfuseError(f"unknown backend {name!r} (choose auto, numpy, or cython)")
