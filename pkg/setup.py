"""Build the optional compiled scan core.

The package works without it: ``m3sr.kernels`` falls back to a NumPy
implementation when ``m3sr._scan_ext`` cannot be imported.
"""
import os

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    compile_args = ["-O3", "-ffast-math"]
    if not os.environ.get("M3SR_PORTABLE"):
        compile_args.append("-march=native")
    ext_modules = cythonize(
        [
            Extension(
                "m3sr._scan_ext",
                ["src/m3sr/_scan_ext.pyx"],
                include_dirs=[np.get_include()],
                libraries=["m"],
                extra_compile_args=compile_args,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
