"""Build script: compiles the optional native kernel extension.

The extension accelerates the convolution and warp inner loops. If the
toolchain is unavailable the build degrades to the pure-numpy backend,
which is selected automatically at import time.
"""

import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the extension if possible; fall back to pure numpy otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, header mismatch, ...
            print(f"warning: native kernels not built ({exc}); "
                  "falling back to numpy backend", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: skipping {ext.name}: {exc}", file=sys.stderr)


def extensions():
    import numpy as np
    from Cython.Build import cythonize

    ext = Extension(
        "seamcam._kernels._native",
        sources=["src/seamcam/_kernels/_native.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
