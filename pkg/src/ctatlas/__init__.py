"""Multi-contrast CT kidney atlas construction and label transfer."""
import numba as _numba

# skip the TBB layer probe; omp and workqueue give the same per-element results
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
