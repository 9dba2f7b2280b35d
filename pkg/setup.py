"""Build script: compiles the optional Cython stream-execution core.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so a failed compile must not break installation.
"""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if possible, otherwise install pure-Python only."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler or Cython missing
            print(f"warning: skipping extension build ({exc}); "
                  "dfeoffload will use the pure-Python engine")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: could not build {ext.name} ({exc}); "
                  "dfeoffload will use the pure-Python engine")


ext_modules = []
if os.environ.get("DFEOFFLOAD_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            ["src/dfeoffload/engine/_core.pyx"],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        print("warning: Cython not available; building without the compiled engine")

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
