# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sparse triangular kernels.

Same contracts as ``sparse_py``.  Arithmetic per output column is a fixed
scalar recurrence, so results are bit-identical for any batch width.
"""

import numpy as np

cimport numpy as cnp

BACKEND = "cython"


def csr_matmat(cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
               double[::1] data, double[:, ::1] x, double[:, ::1] out):
    cdef Py_ssize_t n = out.shape[0]
    cdef Py_ssize_t m = out.shape[1]
    cdef Py_ssize_t i, p, t
    cdef cnp.int64_t j
    cdef double v
    with nogil:
        for i in range(n):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                v = data[p]
                for t in range(m):
                    out[i, t] += v * x[j, t]
    return np.asarray(out)


def solve_lower_inplace(cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
                        double[::1] data, double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    cdef Py_ssize_t i, p, t
    cdef cnp.int64_t j
    cdef double v
    with nogil:
        for i in range(n):
            for p in range(indptr[i], indptr[i + 1] - 1):
                j = indices[p]
                v = data[p]
                for t in range(m):
                    x[i, t] -= v * x[j, t]
            v = data[indptr[i + 1] - 1]
            for t in range(m):
                x[i, t] /= v


def entry_dot(cnp.int64_t[::1] rows, cnp.int64_t[::1] cols,
              double[:, ::1] a, double[:, ::1] b, double[::1] out):
    """out[e] = sum_k a[rows[e], k] * b[cols[e], k]."""
    cdef Py_ssize_t nnz = rows.shape[0]
    cdef Py_ssize_t m = a.shape[1]
    cdef Py_ssize_t e, t
    cdef cnp.int64_t i, j
    cdef double acc
    with nogil:
        for e in range(nnz):
            i = rows[e]
            j = cols[e]
            acc = 0.0
            for t in range(m):
                acc += a[i, t] * b[j, t]
            out[e] = acc
    return np.asarray(out)


def solve_upper_inplace(cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
                        double[::1] data, double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    cdef Py_ssize_t i, p, t
    cdef cnp.int64_t j
    cdef double v
    with nogil:
        for i in range(n - 1, -1, -1):
            for p in range(indptr[i] + 1, indptr[i + 1]):
                j = indices[p]
                v = data[p]
                for t in range(m):
                    x[i, t] -= v * x[j, t]
            v = data[indptr[i]]
            for t in range(m):
                x[i, t] /= v
