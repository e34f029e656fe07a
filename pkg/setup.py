"""Build the optional compiled kernels.

The extension is optional: when Cython or a C compiler is unavailable the
package installs without it and ``celslm.kernels`` falls back to the
pure-Python implementation.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("CELSLM_NO_EXTENSION"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = [
            Extension(
                "celslm._ckernels",
                ["src/celslm/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no fast-math / FMA contraction: results must match the
                # fallback bit for bit
                extra_compile_args=["-O2", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        )

setup(ext_modules=ext_modules)
