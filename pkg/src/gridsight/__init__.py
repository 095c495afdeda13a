"""Compact grid detector with a numpy autodiff engine."""

import os as _os

# GRIDSIGHT_THREADS caps BLAS worker threads (default 1 keeps runs reproducible)
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _os.environ.get("GRIDSIGHT_THREADS", "1"))

__version__ = "0.1.0"
