# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the fused kernels in ``_pykernels``.

Inputs must be C-contiguous float64 (int64 for targets); the dispatcher in
``safm.kernels`` guarantees this.
"""

import numpy as np

from . import _pykernels
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


cdef inline double _tanh(double u) nogil:
    # glibc tanh is several times slower than exp on this range
    return 1.0 - 2.0 / (exp(2.0 * u) + 1.0)


def layer_norm_forward(const double[:, ::1] x, const double[::1] gamma,
                       const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d))
    xhat_arr = np.empty((n, d))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = c
                y[i, j] = c * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    gx_arr = np.empty((n, d))
    gg_arr = np.zeros(d)
    gb_arr = np.zeros(d)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double m1, m2, t
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gg[j] += gy[i, j] * xhat[i, j]
                gb[j] += gy[i, j]
                t = gy[i, j] * gamma[j]
                m1 += t
                m2 += t * xhat[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gx[i, j] = rstd[i] * (gy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
    return gx_arr, gg_arr, gb_arr


def gelu_forward(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out_arr


def gelu_backward(const double[::1] x, const double[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double v, t, dt
    with nogil:
        for i in range(n):
            v = x[i]
            t = _tanh(GELU_C * (v + GELU_A * v * v * v))
            dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            out[i] = gy[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out_arr


def causal_softmax_forward(const double[:, :, ::1] s):
    cdef Py_ssize_t n = s.shape[0], T = s.shape[1], b, i, j
    p_arr = np.zeros((n, T, T))
    cdef double[:, :, ::1] p = p_arr
    cdef double m, tot, e
    with nogil:
        for b in range(n):
            for i in range(T):
                m = -INFINITY
                for j in range(i + 1):
                    if s[b, i, j] > m:
                        m = s[b, i, j]
                tot = 0.0
                for j in range(i + 1):
                    e = exp(s[b, i, j] - m)
                    p[b, i, j] = e
                    tot += e
                for j in range(i + 1):
                    p[b, i, j] /= tot
    return p_arr


def causal_softmax_backward(const double[:, :, ::1] p, const double[:, :, ::1] gp):
    cdef Py_ssize_t n = p.shape[0], T = p.shape[1], b, i, j
    gs_arr = np.zeros((n, T, T))
    cdef double[:, :, ::1] gs = gs_arr
    cdef double acc
    with nogil:
        for b in range(n):
            for i in range(T):
                acc = 0.0
                for j in range(i + 1):
                    acc += gp[b, i, j] * p[b, i, j]
                for j in range(i + 1):
                    gs[b, i, j] = p[b, i, j] * (gp[b, i, j] - acc)
    return gs_arr


# numpy's vectorised exp beats a scalar libm loop at these sizes, so the
# forward pass is shared with the fallback.
cross_entropy_forward = _pykernels.cross_entropy_forward


def cross_entropy_backward(const double[:, ::1] probs, const cnp.int64_t[::1] targets,
                           const double[::1] weights, double g):
    cdef Py_ssize_t n = probs.shape[0], V = probs.shape[1], i, j
    out_arr = np.empty((n, V))
    cdef double[:, ::1] out = out_arr
    cdef double w
    with nogil:
        for i in range(n):
            w = g * weights[i]
            for j in range(V):
                out[i, j] = probs[i, j] * w
            out[i, targets[i]] -= w
    return out_arr


def row_cosine_forward(const double[:, ::1] u, const double[:, ::1] v, double eps):
    cdef Py_ssize_t n = u.shape[0], d = u.shape[1], i, j
    cos_arr = np.empty(n)
    dot_arr = np.empty(n)
    nu_arr = np.empty(n)
    nv_arr = np.empty(n)
    cdef double[::1] cos = cos_arr
    cdef double[::1] dot = dot_arr
    cdef double[::1] nu = nu_arr
    cdef double[::1] nv = nv_arr
    cdef double a, b, c
    with nogil:
        for i in range(n):
            a = 0.0
            b = 0.0
            c = 0.0
            for j in range(d):
                a += u[i, j] * v[i, j]
                b += u[i, j] * u[i, j]
                c += v[i, j] * v[i, j]
            dot[i] = a
            nu[i] = sqrt(b)
            nv[i] = sqrt(c)
            cos[i] = a / (nu[i] * nv[i] + eps)
    return cos_arr, dot_arr, nu_arr, nv_arr


def row_cosine_backward(const double[:, ::1] u, const double[:, ::1] v,
                        const double[::1] dot, const double[::1] nu,
                        const double[::1] nv, double eps, const double[::1] g):
    cdef Py_ssize_t n = u.shape[0], d = u.shape[1], i, j
    gu_arr = np.empty((n, d))
    gv_arr = np.empty((n, d))
    cdef double[:, ::1] gu = gu_arr
    cdef double[:, ::1] gv = gv_arr
    cdef double den, a, b, su, sv
    with nogil:
        for i in range(n):
            den = nu[i] * nv[i] + eps
            a = g[i] / den
            b = g[i] * dot[i] / (den * den)
            su = nv[i] / nu[i] if nu[i] > 0 else 0.0
            sv = nu[i] / nv[i] if nv[i] > 0 else 0.0
            for j in range(d):
                gu[i, j] = a * v[i, j] - b * su * u[i, j]
                gv[i, j] = a * u[i, j] - b * sv * v[i, j]
    return gu_arr, gv_arr
