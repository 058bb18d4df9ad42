# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Signature-compatible with ``deepmf.kernels.pykernels``; all array arguments
are flat C-contiguous float64 (the dispatch layer ravels and reshapes).
Matrix products are not implemented here on purpose: both backends delegate
them to BLAS, which a handwritten loop cannot beat.
"""

import numpy as np

from libc.math cimport exp, expm1, pow, sqrt
from libc.stdint cimport int64_t

NAME = "compiled"

cdef double SELU_SCALE = 1.0507009873554804934193349852946
cdef double SELU_ALPHA = 1.6732632423543772848170429916717

SELU_SCALE_PY = SELU_SCALE
SELU_ALPHA_PY = SELU_ALPHA


cdef inline double _logistic_stable(double z) nogil:
    cdef double e
    if z >= 0.0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef inline Py_ssize_t _bisect_right(const double[::1] a, double x) nogil:
    # Index of the first element strictly greater than x.
    cdef Py_ssize_t lo = 0, hi = a.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if x < a[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def selu_forward(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            if x[i] > 0.0:
                out[i] = SELU_SCALE * x[i]
            else:
                out[i] = (SELU_SCALE * SELU_ALPHA) * expm1(x[i])
    return out_arr


def selu_backward(const double[::1] x, const double[::1] grad_out):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            if x[i] > 0.0:
                out[i] = grad_out[i] * SELU_SCALE
            else:
                out[i] = grad_out[i] * ((SELU_SCALE * SELU_ALPHA) * exp(x[i]))
    return out_arr


def logistic(const double[::1] x, double slope, double center):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = _logistic_stable(slope * (x[i] - center))
    return out_arr


def soft_quantize_forward(const double[::1] x, const double[::1] interior,
                          const double[::1] knots, const double[::1] base_levels,
                          double delta, double lam):
    cdef Py_ssize_t i, s, n = x.shape[0], k = interior.shape[0]
    y_arr = np.empty(n, dtype=np.float64)
    sig_arr = np.empty(n, dtype=np.float64)
    seg_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] y = y_arr
    cdef double[::1] sig = sig_arr
    cdef int64_t[::1] seg = seg_arr
    with nogil:
        for i in range(n):
            s = _bisect_right(knots, x[i]) - 1
            if s < 0:
                s = 0
            elif s > k - 1:
                s = k - 1
            seg[i] = s
            sig[i] = _logistic_stable(lam * (x[i] - interior[s]))
            y[i] = base_levels[s] + delta * sig[i]
    return y_arr, sig_arr, seg_arr


def soft_quantize_backward(const double[::1] grad_out, const double[::1] sig,
                           const int64_t[::1] seg, double delta, double lam,
                           Py_ssize_t n_interior):
    cdef Py_ssize_t i, n = grad_out.shape[0]
    cdef double local
    gx_arr = np.empty(n, dtype=np.float64)
    gb_arr = np.zeros(n_interior, dtype=np.float64)
    cdef double[::1] gx = gx_arr
    cdef double[::1] gb = gb_arr
    with nogil:
        for i in range(n):
            local = grad_out[i] * (delta * lam) * (sig[i] * (1.0 - sig[i]))
            gx[i] = local
            gb[seg[i]] -= local
    return gx_arr, gb_arr


def hard_quantize(const double[::1] x, const double[::1] boundaries,
                  const double[::1] levels):
    cdef Py_ssize_t i, s, n = x.shape[0], d = levels.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            s = _bisect_right(boundaries, x[i]) - 1
            if s < 0:
                s = 0
            elif s > d - 1:
                s = d - 1
            out[i] = levels[s]
    return out_arr


def adam_step(const double[::1] param, const double[::1] grad,
              double[::1] m, double[::1] v, int64_t t,
              double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t i, n = param.shape[0]
    cdef double bc1 = 1.0 - pow(beta1, <double> t)
    cdef double bc2 = 1.0 - pow(beta2, <double> t)
    cdef double mhat, vhat
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * (grad[i] * grad[i])
            mhat = m[i] / bc1
            vhat = v[i] / bc2
            out[i] = param[i] - lr * (mhat / (sqrt(vhat) + eps))
    return out_arr
