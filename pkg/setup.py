"""Build script: compiles the optional Cython kernel core.

The package is fully functional without the extension (a numpy fallback is
selected at import time); the build therefore tolerates a missing compiler
or Cython toolchain and installs pure-Python in that case.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/ccreg/backend/_core.pyx"],
        language_level=3,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
    include_dirs = [numpy.get_include()]
    for ext in ext_modules:
        ext.include_dirs.extend(include_dirs)
        ext.define_macros.append(("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION"))
except Exception as exc:  # pragma: no cover - toolchain-dependent
    print(f"ccreg: skipping compiled core ({exc}); numpy fallback will be used",
          file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
