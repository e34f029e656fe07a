"""Pure-Python (numpy) kernels.

Accumulation order matches ``_ckernels`` exactly: sums run left to right
starting from 0.0 and exponentials go through the C library ``exp`` via
:func:`math.exp`, so both backends agree bit for bit.
"""
import math

import numpy as np


def matmul(a, b):
    # outer-product accumulation == the (i, j, p) triple loop, elementwise
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for p in range(a.shape[1]):
        out += np.multiply.outer(a[:, p], b[p, :])
    return out


def softmax_rows(x):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        shift = max(row.tolist())
        weights = [math.exp(v - shift) for v in row.tolist()]
        total = 0.0
        for w in weights:
            total += w
        out[i] = np.asarray(weights) / total
    return out


def _attend_row(q, k, v):
    scores = matmul(k, q[:, None])[:, 0].tolist()
    shift = max(scores)
    weights = [math.exp(s - shift) for s in scores]
    mant = 0.0
    for w in weights:
        mant += w
    acc = np.zeros(v.shape[1], dtype=np.float64)
    for j, w in enumerate(weights):
        acc += w * v[j]
    return acc / mant, mant, shift


def segment_attention(q, k, v):
    return _attend_row(q, k, v)


def causal_attention(q, k, v, offset):
    nq = q.shape[0]
    out = np.empty((nq, v.shape[1]), dtype=np.float64)
    mant = np.empty(nq, dtype=np.float64)
    shifts = np.empty(nq, dtype=np.float64)
    for i in range(nq):
        n = offset + i + 1
        out[i], mant[i], shifts[i] = _attend_row(q[i], k[:n], v[:n])
    return out, mant, shifts
