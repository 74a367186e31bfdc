"""Numerical core: batched symmetric 3x3 eigendecomposition.

This kernel sits on the hot path of tensor fitting, metric derivation and
the per-patch singular-value loss, so it exists in two interchangeable
implementations:

* ``_eig3`` -- Cython extension, element-wise C loops (preferred).
* ``_eig3_np`` -- vectorized NumPy fallback, same algorithm.

The compiled backend is selected at import when available.  Set the
environment variable ``SVDTI_FORCE_NUMPY=1`` to force the fallback (used
by the benchmark and the backend-equivalence tests).

Both backends implement the same scheme: closed-form solution of the
characteristic cubic with cross-product eigenvectors, guarded by a
residual check that falls back to cyclic Jacobi rotations for degenerate
or ill-conditioned inputs.  Results agree to ~1e-12; bit-for-bit
reproducibility is guaranteed per backend, not across backends.
"""

import os

if os.environ.get("SVDTI_FORCE_NUMPY"):
    from ._eig3_np import eig3_batch

    BACKEND = "numpy"
else:
    try:
        from ._eig3 import eig3_batch

        BACKEND = "cython"
    except ImportError:
        from ._eig3_np import eig3_batch

        BACKEND = "numpy"

__all__ = ["eig3_batch", "BACKEND"]
