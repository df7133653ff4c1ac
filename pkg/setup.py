"""Build hook for the optional compiled Monte-Carlo kernel.

The package works without the extension (a pure-Python twin is selected at
import time); compiling it makes the large-trial distribution checks run
orders of magnitude faster.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "specdesk._mc",
                sources=["src/specdesk/_mc.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
