"""Build script: compiles the optional kernel extension when Cython is available.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes the hot loops faster.  Build in place
with `python setup.py build_ext --inplace`.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/cvtrack/_kernels/_core.pyx"],
        compiler_directives={"language_level": 3, "boundscheck": False, "wraparound": False},
    )
    for ext in ext_modules:
        ext.extra_compile_args = ["-O3"]
except ImportError:
    pass

setup(ext_modules=ext_modules)
