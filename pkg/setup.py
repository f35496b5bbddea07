import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

flags = ["-O3"]
if not os.environ.get("VIRALNET_PORTABLE"):
    flags.append("-march=native")

extensions = [
    Extension(
        "viralnet._ckernels",
        ["src/viralnet/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=flags,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
