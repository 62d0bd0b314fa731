"""2D/3D X-ray to CT registration from arbitrary-landmark ray-embedding correspondences."""

import os

import numba

# the bundled TBB is too old for numba; avoid the probe warning
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

__version__ = "0.1.0"
