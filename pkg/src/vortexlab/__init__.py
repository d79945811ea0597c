"""Random vortex particles, the mean-field vorticity PDE and entropy diagnostics."""
__version__ = "0.1.0"

from ._backend import NAME as BACKEND  # noqa: E402,F401
