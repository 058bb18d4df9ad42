import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("DEEPMF_NO_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "deepmf.kernels._ckernels",
                    ["src/deepmf/kernels/_ckernels.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython: install with the pure-Python kernels only.
        ext_modules = []

setup(ext_modules=ext_modules)
