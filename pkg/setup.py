import os

import numpy
from setuptools import Extension, setup

# The compiled kernels are optional: without Cython the package still
# installs and runs on the pure-Python backend.
ext_modules = []
if os.environ.get("TIMEBLOCKS_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "timeblocks._ckernels",
                    ["src/timeblocks/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": 3},
        )

setup(ext_modules=ext_modules)
