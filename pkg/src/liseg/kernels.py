"""Kernel dispatch: compiled Cython kernels when built, numpy fallback otherwise.

Set ``LISEG_KERNELS=python`` to force the fallback (used by the benchmark and the
cross-backend tests).
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and os.environ.get("LISEG_KERNELS", "").lower() != "python":
    BACKEND = "cython"
    _impl = _ckernels
else:
    BACKEND = "python"
    _impl = _pykernels

im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d
edt_sq = _impl.edt_sq


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def get_backend(name):
    """Return the kernel module for ``name`` ("python" or "cython")."""
    if name == "python":
        return _pykernels
    if name == "cython" and _ckernels is not None:
        return _ckernels
    raise ValueError(f"kernel backend {name!r} is not available")


def use_backend(name):
    """Rebind the module-level kernels to ``name``; returns the previous backend name."""
    global BACKEND, _impl, im2col3d, col2im3d, edt_sq
    previous = BACKEND
    _impl = get_backend(name)
    BACKEND = name
    im2col3d, col2im3d, edt_sq = _impl.im2col3d, _impl.col2im3d, _impl.edt_sq
    return previous
