"""Build script: compiles the image-source accumulation kernel when Cython
and a C compiler are available.  The package works without the extension
(a vectorized NumPy fallback is selected at import time), so any build
failure here downgrades to a warning instead of aborting the install."""

import sys

from setuptools import Extension, setup


def _extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("mmgploc: Cython not available, skipping compiled kernel", file=sys.stderr)
        return []
    ext = Extension(
        "mmgploc._imagesource",
        ["src/mmgploc/_imagesource.pyx"],
        extra_compile_args=["-O3"],
    )
    try:
        return cythonize([ext], compiler_directives={"language_level": "3"})
    except Exception as exc:  # pragma: no cover - toolchain specific
        print(f"mmgploc: cythonize failed ({exc}), skipping compiled kernel", file=sys.stderr)
        return []


setup(ext_modules=_extensions())
