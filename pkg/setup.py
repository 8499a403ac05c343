import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

# The march kernels fall back to a pure-numpy implementation at import time
# if this extension is missing, so a failed build still yields a working
# (slower) package: `pip install . --no-binary :all:` etc.
extensions = [
    Extension(
        "voxelhead.kernels._march",
        ["src/voxelhead/kernels/_march.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-march=native", "-funroll-loops", "-fopenmp"],
        extra_link_args=["-fopenmp"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )
)
