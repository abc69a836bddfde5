import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install
    cythonize = None

# fp-contract=off keeps a*b+c as two roundings so kernels match nested-loop oracles bit for bit
compile_args = ["-O3", "-ffp-contract=off"]
if os.environ.get("BDARTS_MARCH_NATIVE"):
    compile_args.append("-march=native")

ext_modules = []
if cythonize is not None and not os.environ.get("BDARTS_NO_EXT"):
    ext = Extension(
        "bdarts.engine._ckernels",
        ["src/bdarts/engine/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
