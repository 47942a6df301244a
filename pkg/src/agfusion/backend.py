"""Kernel backend selection and MAC instrumentation.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``AGF_BACKEND=python`` forces the fallback and
``AGF_BACKEND=cython`` makes a missing extension an import error.
"""

from __future__ import annotations

import contextvars
import os
from dataclasses import dataclass

from . import _pykernels

_choice = os.environ.get("AGF_BACKEND", "auto").lower()
if _choice == "python":
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:
        if _choice == "cython":
            raise
        _compiled = None

KERNELS = {"python": _pykernels}
if _compiled is not None:
    KERNELS["cython"] = _compiled

_current = contextvars.ContextVar("agfusion_backend", default="cython" if _compiled else "python")


def name() -> str:
    """Name of the backend used by the differentiable ops in this context."""
    return _current.get()


def kernels():
    return KERNELS[_current.get()]


def available() -> list[str]:
    return sorted(KERNELS)


class use:
    """Context manager selecting a backend by name for the enclosed block."""

    def __init__(self, backend: str):
        if backend not in KERNELS:
            raise ValueError(f"backend {backend!r} not available; have {available()}")
        self.backend = backend

    def __enter__(self):
        self._token = _current.set(self.backend)
        return self

    def __exit__(self, *exc):
        _current.reset(self._token)


@dataclass
class MacCounter:
    """Tally of multiply-accumulates reported by the kernels."""

    attention: int = 0
    projection: int = 0

    def __enter__(self) -> "MacCounter":
        self._token = _counter.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _counter.reset(self._token)


_counter: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "agfusion_macs", default=None
)


def tally(kind: str, macs: int) -> None:
    c = _counter.get()
    if c is not None:
        setattr(c, kind, getattr(c, kind) + int(macs))
