"""Build the optional compiled kernels.

The package works without them: ``vortexlab._backend`` falls back to the
NumPy implementation when ``vortexlab._ckernels`` cannot be imported.
"""
import os
import sys

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("VORTEXLAB_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover
        cythonize = None
    if cythonize is not None:
        # no -ffast-math / FMA contraction: the NumPy fallback reproduces
        # the compiled direct sum bit for bit
        compile_args = ["-O3", "-ffp-contract=off", "-fno-fast-math"]
        link_args = []
        if sys.platform.startswith("linux"):
            compile_args.append("-fopenmp")
            link_args.append("-fopenmp")
        ext_modules = cythonize(
            [
                Extension(
                    "vortexlab._ckernels",
                    ["src/vortexlab/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=compile_args,
                    extra_link_args=link_args,
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
