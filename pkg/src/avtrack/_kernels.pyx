# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fixed-order forward kernels.

Every output element is accumulated strictly sequentially in the order
documented in :mod:`avtrack.backend`; vectorisation only runs across
independent outputs, and the extension is built with ``-ffp-contract=off``
so no fused multiply-add changes the rounding.  The results are therefore
bit-identical to :mod:`avtrack._fallback` and to plain nested loops.
"""

import numpy as np
from cython cimport floating
from libc.math cimport sqrt

NAME = "compiled"

DEF TBLOCK = 8


def conv1d_forward(const floating[:, :, ::1] x, const floating[:, :, ::1] kernel,
                   const floating[::1] bias, floating[:, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], Cin = x.shape[2]
    cdef Py_ssize_t K = kernel.shape[0], Cout = kernel.shape[2]
    cdef Py_ssize_t pad = K // 2
    cdef Py_ssize_t b, t0, nt, tt, k, ci, co, src
    cdef floating xv
    acc_arr = np.zeros((TBLOCK, Cout), dtype=np.asarray(out).dtype)
    cdef floating[:, ::1] acc = acc_arr
    cdef const floating[::1] wrow

    for b in range(B):
        t0 = 0
        while t0 < T:
            nt = T - t0
            if nt > TBLOCK:
                nt = TBLOCK
            for tt in range(nt):
                for co in range(Cout):
                    acc[tt, co] = 0
            for k in range(K):
                for ci in range(Cin):
                    wrow = kernel[k, ci, :]
                    for tt in range(nt):
                        src = t0 + tt + k - pad
                        if src < 0 or src >= T:
                            continue
                        xv = x[b, src, ci]
                        for co in range(Cout):
                            acc[tt, co] += xv * wrow[co]
            for tt in range(nt):
                for co in range(Cout):
                    out[b, t0 + tt, co] = acc[tt, co] + bias[co]
            t0 += TBLOCK


def conv3d_forward(const floating[:, :, :, :, ::1] x, const floating[:, :, :, :, ::1] kernel,
                   const floating[::1] bias, Py_ssize_t stride,
                   floating[:, :, :, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1]
    cdef Py_ssize_t Cin = x.shape[4]
    cdef Py_ssize_t KT = kernel.shape[0], KH = kernel.shape[1], KW = kernel.shape[2]
    cdef Py_ssize_t Cout = kernel.shape[4]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t pad = KT // 2
    cdef Py_ssize_t b, t, i, j, kt, kh, kw, ci, co, src
    cdef floating xv
    acc_arr = np.zeros(Cout, dtype=np.asarray(out).dtype)
    cdef floating[::1] acc = acc_arr
    cdef const floating[::1] wrow

    for b in range(B):
        for t in range(T):
            for i in range(Ho):
                for j in range(Wo):
                    for co in range(Cout):
                        acc[co] = 0
                    for kt in range(KT):
                        src = t + kt - pad
                        if src < 0 or src >= T:
                            continue
                        for kh in range(KH):
                            for kw in range(KW):
                                for ci in range(Cin):
                                    xv = x[b, src, i * stride + kh, j * stride + kw, ci]
                                    wrow = kernel[kt, kh, kw, ci, :]
                                    for co in range(Cout):
                                        acc[co] += xv * wrow[co]
                    for co in range(Cout):
                        out[b, t, i, j, co] = acc[co] + bias[co]


def bilinear_forward(const floating[:, :, ::1] q, const floating[:, ::1] w_t,
                     const floating[:, :, ::1] v, floating[:, :, ::1] proj,
                     floating[:, :, ::1] out):
    # w_t is W transposed ([Dv, Dq]) so the projection loop runs contiguously over Dq.
    cdef Py_ssize_t B = q.shape[0], T = q.shape[1], Dq = q.shape[2]
    cdef Py_ssize_t N = v.shape[0], Dv = v.shape[2]
    cdef Py_ssize_t i, j, k, l, m
    cdef floating vm, acc

    for k in range(N):
        for j in range(T):
            for l in range(Dq):
                proj[k, j, l] = 0
            for m in range(Dv):
                vm = v[k, j, m]
                for l in range(Dq):
                    proj[k, j, l] += w_t[m, l] * vm
    for i in range(B):
        for j in range(T):
            for k in range(N):
                acc = 0
                for l in range(Dq):
                    acc += q[i, j, l] * proj[k, j, l]
                out[i, j, k] = acc


def adam_update(floating[::1] value, const floating[::1] grad, floating[::1] m, floating[::1] v,
                double lr, double beta1, double beta2, double c1, double c2, double eps):
    """In-place Adam update on flat arrays, same operation order as the numpy path."""
    cdef Py_ssize_t i, n = value.shape[0]
    cdef floating g, mi, vi
    cdef floating b1 = beta1, b2 = beta2, ob1 = 1.0 - beta1, ob2 = 1.0 - beta2
    cdef floating fc1 = c1, fc2 = c2, flr = lr, feps = eps
    for i in range(n):
        g = grad[i]
        mi = m[i] * b1
        mi = mi + ob1 * g
        vi = v[i] * b2
        vi = vi + (ob2 * g) * g
        m[i] = mi
        v[i] = vi
        value[i] = value[i] - (flr * (mi / fc1)) / (sqrt(vi / fc2) + feps)
