"""Builds the optional compiled kernel extension.

The package is fully functional without it: if Cython or a C toolchain is
missing, or compilation fails, installation proceeds and
``branchmpc._kernels`` falls back to the numpy reference backend at import.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Degrade extension build failures to a warning."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # toolchain missing or broken
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(f"WARNING: compiled kernels not built ({exc}); "
              "the numpy fallback backend will be used")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("WARNING: Cython unavailable; building without compiled kernels")
        return []
    ext = Extension(
        "branchmpc._kernels.native",
        ["src/branchmpc/_kernels/native.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
