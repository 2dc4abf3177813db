"""Build script: compiles the bitstream codec extension when Cython is available.

The package works without the extension (a pure-Python fallback is selected
at import time), so a failed or skipped compilation is not fatal.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "sftsim.compression._kernels_cy",
                ["src/sftsim/compression/_kernels_cy.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level="3",
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
