# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the Bellman backups.

Both functions work on row ranges so a caller can split the rows across
threads; the GIL is released inside the loops.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def min_expectation(const double[:, :, ::1] values,
                    const double[:, ::1] probs,
                    double[::1] out_value,
                    long long[::1] out_arg,
                    Py_ssize_t start,
                    Py_ssize_t stop):
    """Row-wise ``min_u sum_w probs[i, w] * values[i, u, w]`` with 0*inf = 0.

    Terms with zero probability are skipped, the sum runs in increasing
    ``w`` and ties keep the smallest ``u``.
    """
    cdef Py_ssize_t i, u, w
    cdef Py_ssize_t n_u = values.shape[1]
    cdef Py_ssize_t n_w = values.shape[2]
    cdef double acc, best, p
    cdef long long arg
    with nogil:
        for i in range(start, stop):
            best = 0.0
            arg = 0
            for u in range(n_u):
                acc = 0.0
                for w in range(n_w):
                    p = probs[i, w]
                    if p > 0.0:
                        acc = acc + p * values[i, u, w]
                if u == 0 or acc < best:
                    best = acc
                    arg = u
            out_value[i] = best
            out_arg[i] = arg


def min_last_axis(const double[:, ::1] values,
                  double[::1] out_value,
                  long long[::1] out_arg,
                  Py_ssize_t start,
                  Py_ssize_t stop):
    """Row-wise minimum and first argmin."""
    cdef Py_ssize_t i, k
    cdef Py_ssize_t n_k = values.shape[1]
    cdef double best, v
    cdef long long arg
    with nogil:
        for i in range(start, stop):
            best = values[i, 0]
            arg = 0
            for k in range(1, n_k):
                v = values[i, k]
                if v < best:
                    best = v
                    arg = k
            out_value[i] = best
            out_arg[i] = arg
