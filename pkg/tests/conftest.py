"""Pin BLAS/OpenMP thread counts before numpy loads anywhere.

Single-threaded kernels keep floating-point reduction order fixed, which the
bitwise reproducibility tests rely on.
"""

import os

for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
           "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_k, "1")
