from glob import glob

from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup

ext = Pybind11Extension(
    "loomnet._loomnet",
    sorted(glob("src/*.cpp")) + ["python/module.cpp"],
    include_dirs=["include", "vendor"],
    cxx_std=20,
)

setup(
    packages=["loomnet"],
    package_dir={"loomnet": "python/loomnet"},
    ext_modules=[ext],
    cmdclass={"build_ext": build_ext},
)
