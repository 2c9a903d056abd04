# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, sqrt

cnp.import_array()

DEF QUADRATIC = 0
DEF LOGISTIC = 1
DEF HINGE = 2


cdef inline double _softplus_neg(double t) nogil:
    # log(1 + exp(-t)), stable for both signs
    if t > 0:
        return log1p(exp(-t))
    return -t + log1p(exp(t))


def example_losses(int kind, double[:, ::1] X, double[::1] y, double[::1] w):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, k
    cdef double z
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    if kind < 0 or kind > 2:
        raise ValueError(f"unknown loss kind {kind}")
    with nogil:
        for i in range(n):
            z = 0.0
            if kind == QUADRATIC:
                for k in range(d):
                    z += X[i, k] * w[k] * w[k]
                o[i] = 0.5 * z
                continue
            for k in range(d):
                z += X[i, k] * w[k]
            if kind == LOGISTIC:
                o[i] = _softplus_neg(y[i] * z)
            else:
                o[i] = 1.0 - y[i] * z if 1.0 - y[i] * z > 0.0 else 0.0
    return out


def loss_grad(int kind, double[:, ::1] X, double[::1] y, cnp.int64_t[::1] idx,
              double[::1] w, double l2, double[::1] grad_out):
    cdef Py_ssize_t m = idx.shape[0], d = X.shape[1], b, k, row
    cdef double z, c, total = 0.0, yz, margin, ww = 0.0
    if kind < 0 or kind > 2:
        raise ValueError(f"unknown loss kind {kind}")
    with nogil:
        for k in range(d):
            grad_out[k] = 0.0
        for b in range(m):
            row = idx[b]
            z = 0.0
            if kind == QUADRATIC:
                # diagonal curvatures: accumulate X[row] * w into the gradient
                for k in range(d):
                    c = X[row, k] * w[k]
                    grad_out[k] += c
                    z += c * w[k]
                total += 0.5 * z
                continue
            for k in range(d):
                z += X[row, k] * w[k]
            if kind == LOGISTIC:
                yz = y[row] * z
                total += _softplus_neg(yz)
                c = -y[row] * exp(-(_softplus_neg(-yz)))
            else:
                margin = 1.0 - y[row] * z
                if margin > 0.0:
                    total += margin
                    c = -y[row]
                else:
                    c = 0.0
            if c != 0.0:
                for k in range(d):
                    grad_out[k] += c * X[row, k]
        for k in range(d):
            grad_out[k] /= m
        total /= m
        if l2 != 0.0:
            for k in range(d):
                grad_out[k] += l2 * w[k]
                ww += w[k] * w[k]
            total += 0.5 * l2 * ww
    return total


def matern52_gram(double[:, ::1] A, double[:, ::1] B, double[::1] inv_lengthscales,
                  double signal_variance):
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], d = A.shape[1], i, j, k
    cdef double acc, t, r
    cdef double s5 = sqrt(5.0)
    out = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] K = out
    with nogil:
        for i in range(na):
            for j in range(nb):
                acc = 0.0
                for k in range(d):
                    t = (A[i, k] - B[j, k]) * inv_lengthscales[k]
                    acc += t * t
                r = sqrt(acc)
                K[i, j] = signal_variance * (1.0 + s5 * r + (5.0 / 3.0) * acc) * exp(-s5 * r)
    return out
