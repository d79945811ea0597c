"""Select the compiled kernels when available, else the NumPy fallback.

Set ``VORTEXLAB_BACKEND=python`` to force the fallback.
"""
import os

from . import _pykernels

NAME = "python"
kernels = _pykernels

if os.environ.get("VORTEXLAB_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        NAME = "cython"


def get(name=None):
    """Return the kernel module for ``name`` ('cython', 'python' or None=active)."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
