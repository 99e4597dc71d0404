"""Build script: compiles the optional Cython convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time), so any build failure here is non-fatal by design: install
with the extension skipped via `EEGMATCH_SKIP_EXT=1 pip install -e .` if
no C toolchain is available.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("EEGMATCH_SKIP_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "eegmatch._kernels._conv_ext",
                    sources=["src/eegmatch/_kernels/_conv_ext.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
