"""Build the optional Cython kernel extension.

If Cython or a C compiler is unavailable the package still installs and the
pure-numpy kernels in ``distgan._pykernels`` are used instead.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("DISTGAN_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "distgan._kernels",
                    ["src/distgan/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: results must match the numpy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
                    optional=True,
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
