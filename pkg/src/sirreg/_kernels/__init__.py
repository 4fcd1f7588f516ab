"""Sparse triangular kernels with a compiled core and a pure-Python fallback.

The compiled extension is preferred when it imported cleanly; set the
environment variable ``SIRREG_KERNELS=python`` (or ``cython``) before import
to force a backend.  :func:`backend_name` reports the active choice and
:func:`available_backends` lists what can be benchmarked on this install.
"""

from __future__ import annotations

import os

import numpy as np

from . import sparse_py

_FORCED = os.environ.get("SIRREG_KERNELS", "").strip().lower()

try:
    from . import _sparse_cy
except ImportError:
    _sparse_cy = None

if _FORCED == "python":
    _impl = sparse_py
elif _FORCED == "cython":
    if _sparse_cy is None:
        raise ImportError(
            "SIRREG_KERNELS=cython but the compiled extension is not available"
        )
    _impl = _sparse_cy
else:
    _impl = _sparse_cy if _sparse_cy is not None else sparse_py


def backend_name() -> str:
    return _impl.BACKEND


def available_backends() -> dict:
    out = {"python": sparse_py}
    if _sparse_cy is not None:
        out["cython"] = _sparse_cy
    return out


def _as_batch(b: np.ndarray):
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        return np.ascontiguousarray(b.reshape(-1, 1)), True
    return np.ascontiguousarray(b), False


def entry_dot(rows, cols, a, b, impl=None) -> np.ndarray:
    """Row-gathered dot products: out[e] = a[rows[e], :] . b[cols[e], :]."""
    impl = impl or _impl
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
        b = b.reshape(-1, 1)
    out = np.empty(rows.size)
    impl.entry_dot(rows, cols, a, b, out)
    return out


def csr_matvec(indptr, indices, data, b, impl=None) -> np.ndarray:
    """A @ b for the CSR triple; b may be (n,) or (n, m)."""
    impl = impl or _impl
    x, squeeze = _as_batch(b)
    out = np.zeros_like(x)
    impl.csr_matmat(indptr, indices, data, x, out)
    return out[:, 0] if squeeze else out


def _solve(kernel_name, indptr, indices, data, b, impl):
    x, squeeze = _as_batch(b)
    x = x.copy()
    kernel = getattr(impl, kernel_name)
    if impl.BACKEND == "python" and x.shape[1] > 1:
        # one column at a time: the recurrence then runs with the same
        # operation order as a single-vector solve, so results are
        # bit-identical no matter how callers batch their right-hand sides
        # (the compiled backend has this property by construction)
        for t in range(x.shape[1]):
            col = np.ascontiguousarray(x[:, t : t + 1])
            kernel(indptr, indices, data, col)
            x[:, t] = col[:, 0]
    else:
        kernel(indptr, indices, data, x)
    return x[:, 0] if squeeze else x


def solve_lower(indptr, indices, data, b, impl=None) -> np.ndarray:
    """Solve A x = b for lower-triangular CSR whose rows end in the diagonal."""
    return _solve("solve_lower_inplace", indptr, indices, data, b, impl or _impl)


def solve_upper(indptr, indices, data, b, impl=None) -> np.ndarray:
    """Solve A x = b for upper-triangular CSR whose rows start with the diagonal."""
    return _solve("solve_upper_inplace", indptr, indices, data, b, impl or _impl)
