"""Build the optional fixed-order kernel extension.

If Cython or a C compiler is missing the package installs without it and
``avtrack.backend`` falls back to the pure-numpy kernels.
"""

import os
import sys

from setuptools import setup

# Exact-order accumulation: no FMA contraction, no fast-math reassociation.
compile_args = ["-O3", "-ffp-contract=off", "-fno-math-errno"]
if os.environ.get("AVTRACK_PORTABLE") is None and sys.platform != "win32":
    compile_args.append("-march=native")

ext_modules = []
if os.environ.get("AVTRACK_NO_EXT") is None:
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension(
                "avtrack._kernels",
                sources=["src/avtrack/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
            )],
            language_level=3,
        )
    except ImportError as exc:
        print(f"avtrack: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
