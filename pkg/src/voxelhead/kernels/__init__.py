"""March-kernel backend selection.

The compiled Cython extension is preferred; a pure-numpy fallback keeps
the package functional without it. ``set_backend`` lets the benchmark
compare both.
"""

from __future__ import annotations

from . import numpy_backend

try:
    from . import _march  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - depends on the build
    _march = None
    HAVE_COMPILED = False

_active = "compiled" if HAVE_COMPILED else "numpy"


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in ("compiled", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and not HAVE_COMPILED:
        raise RuntimeError("compiled march extension is not available")
    _active = name
