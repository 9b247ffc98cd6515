"""Builds the optional Cython kernel extension.

The package works without it: volterra_edit.kernels falls back to the
pure-NumPy implementation when the compiled module is missing.
"""

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "volterra_edit.kernels._ck",
                sources=["src/volterra_edit/kernels/_ck.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"skipping Cython extension ({exc}); pure-NumPy kernels will be used")
    ext_modules = []

setup(ext_modules=ext_modules)
