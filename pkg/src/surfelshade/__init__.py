"""CPU differentiable surfel renderer with deferred shading and a learnable spherical mipmap."""

import os

# the OpenMP layer is deterministic, quiet and always bundled with numba wheels
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
