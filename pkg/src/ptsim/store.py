"""Pick the page-table store backend at import time.

The compiled ``_store`` extension is used when it was built; otherwise the
pure-Python twin in ``_store_py``. Setting ``PTSIM_BACKEND=python`` forces
the fallback (``cython`` makes a missing extension an ImportError).
"""

from __future__ import annotations

import os

from . import _store_py

_requested = os.environ.get("PTSIM_BACKEND", "").strip().lower()

try:
    if _requested == "python":
        raise ImportError("pure-Python backend requested")
    from . import _store as _compiled
except ImportError:
    if _requested == "cython":
        raise
    _compiled = None

PageStore = _compiled.PageStore if _compiled is not None else _store_py.PageStore
BACKEND = PageStore.backend


def available_backends() -> list[str]:
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def store_class(backend: str | None = None) -> type:
    if backend is None:
        return PageStore
    if backend == "python":
        return _store_py.PageStore
    if backend == "cython":
        if _compiled is None:
            raise ImportError("compiled store extension is not built")
        return _compiled.PageStore
    raise ValueError(f"unknown store backend {backend!r}")
