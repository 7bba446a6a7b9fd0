"""Build script for the compiled convolution kernels.

The package works without the extension (a numpy fallback is selected at
import), so a failed build degrades gracefully instead of blocking the
install. Set FLOWCAST_PURE_PYTHON=1 to skip compilation entirely.
"""
import os

from setuptools import Extension, setup

extensions = []
if not os.environ.get("FLOWCAST_PURE_PYTHON"):
    try:
        import numpy as np
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "flowcast.kernels._conv_cy",
                    ["src/flowcast/kernels/_conv_cy.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-march=native", "-funroll-loops", "-fopenmp"],
                    extra_link_args=["-fopenmp"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        extensions = []

setup(ext_modules=extensions)
