"""Build script: compiles the optional sparse-kernel extension when Cython and
a C toolchain are available, and falls back to a pure-Python install otherwise.
"""

import warnings

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "sirreg._kernels._sparse_cy",
                ["src/sirreg/_kernels/_sparse_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError as exc:  # pragma: no cover - depends on build env
    warnings.warn(f"building without the compiled kernels ({exc})")

setup(ext_modules=ext_modules)
