import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("RESFLOW_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "resflow._kdtree_ext",
                    ["src/resflow/_kdtree_ext.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # keep squared distances bit-identical to the numpy fallback
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
