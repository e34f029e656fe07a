# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled attention and matrix kernels.

Every loop accumulates left to right in the same order as the pure-Python
fallback in ``_pykernels`` so both backends produce identical bits.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double acc
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc = acc + a[i, p] * b[p, j]
            c[i, j] = acc
    return out


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double shift, total
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(m):
        shift = x[i, 0]
        for j in range(1, n):
            if x[i, j] > shift:
                shift = x[i, j]
        total = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - shift)
            total = total + y[i, j]
        for j in range(n):
            y[i, j] = y[i, j] / total
    return out


cdef double _attend_row(double[::1] q, double[:, ::1] k, double[:, ::1] v,
                        Py_ssize_t nkeys, double[::1] scores, double[::1] o,
                        double* shift_out) nogil:
    cdef Py_ssize_t d = k.shape[1], dv = v.shape[1]
    cdef Py_ssize_t j, p
    cdef double acc, shift, mant
    for j in range(nkeys):
        acc = 0.0
        for p in range(d):
            acc = acc + k[j, p] * q[p]
        scores[j] = acc
    shift = scores[0]
    for j in range(1, nkeys):
        if scores[j] > shift:
            shift = scores[j]
    mant = 0.0
    for j in range(nkeys):
        scores[j] = exp(scores[j] - shift)
        mant = mant + scores[j]
    for p in range(dv):
        acc = 0.0
        for j in range(nkeys):
            acc = acc + scores[j] * v[j, p]
        o[p] = acc / mant
    shift_out[0] = shift
    return mant


def segment_attention(double[::1] q, double[:, ::1] k, double[:, ::1] v):
    cdef Py_ssize_t n = k.shape[0]
    cdef double shift = 0.0
    cdef double mant
    o = np.empty(v.shape[1], dtype=np.float64)
    scores = np.empty(n, dtype=np.float64)
    mant = _attend_row(q, k, v, n, scores, o, &shift)
    return o, mant, shift


def causal_attention(double[:, ::1] q, double[:, ::1] k, double[:, ::1] v, Py_ssize_t offset):
    cdef Py_ssize_t nq = q.shape[0], i
    cdef double shift = 0.0
    out = np.empty((nq, v.shape[1]), dtype=np.float64)
    mant = np.empty(nq, dtype=np.float64)
    shifts = np.empty(nq, dtype=np.float64)
    scores = np.empty(k.shape[0], dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] mv = mant
    cdef double[::1] sv = shifts
    cdef double[::1] sc = scores
    for i in range(nq):
        mv[i] = _attend_row(q[i], k, v, offset + i + 1, sc, o[i], &shift)
        sv[i] = shift
    return out, mant, shifts
