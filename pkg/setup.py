import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("POWDB_PURE") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "powdb._minecore",
                    ["src/powdb/_minecore.pyx"],
                    libraries=["crypto"],
                    extra_compile_args=["-O3", "-Wno-deprecated-declarations"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython available: install pure-Python only, the mining
        # backend falls back to hashlib at import time.
        ext_modules = []

setup(ext_modules=ext_modules)
