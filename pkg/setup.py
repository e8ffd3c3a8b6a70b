import os

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    USE_CYTHON = os.environ.get("SKYSPLAT_NO_EXT", "") != "1"
except ImportError:
    USE_CYTHON = False


EXTENSIONS = []
if USE_CYTHON:
    EXTENSIONS = cythonize(
        [
            Extension(
                "skysplat.render._kernel",
                ["src/skysplat/render/_kernel.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=EXTENSIONS)
