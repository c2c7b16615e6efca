"""Backend selection for the hot loops.

The compiled Cython extension is used when it imports cleanly; otherwise the
numpy implementations are used. Set ``FRCNN_PURE_PYTHON=1`` to force the
fallback (tests and the benchmark use :func:`get_backend` to pick either one
explicitly).
"""

import os

from . import _pykernels

try:
    if os.environ.get("FRCNN_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python backend forced")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


roi_pool_forward = _impl.roi_pool_forward
roi_pool_backward = _impl.roi_pool_backward
nms_sorted = _impl.nms_sorted
jacobi_svd = _impl.jacobi_svd
