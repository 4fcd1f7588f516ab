"""Pure-numpy implementations of the sparse triangular kernels.

These are the fallback used when the compiled extension is unavailable.  The
triangular solves carry a sequential data dependency across rows, so this
backend pays one Python-level iteration per row; the compiled backend runs the
same recurrences in C.  Results agree with the compiled backend to the last
few ulps (the inner products may associate differently).
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def csr_matmat(indptr, indices, data, x, out):
    """out += A @ x for CSR (indptr, indices, data); x, out are (n, m).

    Every row must be non-empty (true for triangular factors, whose diagonal
    is always stored).
    """
    prod = data[:, None] * x[indices]
    np.add.reduceat(prod, indptr[:-1], axis=0, out=out[:])
    return out


def entry_dot(rows, cols, a, b, out):
    """out[e] = sum_k a[rows[e], k] * b[cols[e], k] (chunked gather)."""
    chunk = 1 << 20
    for s in range(0, rows.size, chunk):
        e = min(s + chunk, rows.size)
        out[s:e] = np.einsum("ek,ek->e", a[rows[s:e]], b[cols[s:e]])
    return out


def solve_lower_inplace(indptr, indices, data, x):
    """Forward substitution; each CSR row must end with its diagonal."""
    n = x.shape[0]
    for i in range(n):
        s = indptr[i]
        e = indptr[i + 1]
        if e - s > 1:
            x[i] -= data[s : e - 1] @ x[indices[s : e - 1]]
        x[i] /= data[e - 1]


def solve_upper_inplace(indptr, indices, data, x):
    """Back substitution; each CSR row must start with its diagonal."""
    n = x.shape[0]
    for i in range(n - 1, -1, -1):
        s = indptr[i]
        e = indptr[i + 1]
        if e - s > 1:
            x[i] -= data[s + 1 : e] @ x[indices[s + 1 : e]]
        x[i] /= data[s]
