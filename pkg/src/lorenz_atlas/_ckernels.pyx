# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for truncated two-variable Cauchy products."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fma, fabs

cnp.import_array()


def conv2_trunc(const double[:, ::1] a, const double[:, ::1] b, Py_ssize_t P, Py_ssize_t Q):
    """Truncated 2-d Cauchy product, output shape (P, Q)."""
    cdef Py_ssize_t pa = a.shape[0], qa = a.shape[1]
    cdef Py_ssize_t pb = b.shape[0], qb = b.shape[1]
    out_arr = np.zeros((P, Q))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t j, k, m, n, mmax, nmax
    cdef double x
    with nogil:
        for j in range(min(pa, P)):
            mmax = min(pb, P - j)
            for k in range(min(qa, Q)):
                x = a[j, k]
                if x == 0.0:
                    continue
                nmax = min(qb, Q - k)
                for m in range(mmax):
                    for n in range(nmax):
                        out[j + m, k + n] += x * b[m, n]
    return out_arr


def conv2_dot2(const double[:, ::1] a, const double[:, ::1] b, Py_ssize_t P, Py_ssize_t Q):
    """Compensated truncated 2-d Cauchy product.

    Returns ``(value, abs_sum, count)``: the compensated sums, the sums of
    the magnitudes of the products and the number of terms per cell. The
    caller turns these into a rigorous radius.
    """
    cdef Py_ssize_t pa = a.shape[0], qa = a.shape[1]
    cdef Py_ssize_t pb = b.shape[0], qb = b.shape[1]
    val_arr = np.zeros((P, Q))
    abs_arr = np.zeros((P, Q))
    cnt_arr = np.zeros((P, Q))
    comp_arr = np.zeros((P, Q))
    cdef double[:, ::1] s = val_arr
    cdef double[:, ::1] c = comp_arr
    cdef double[:, ::1] ab = abs_arr
    cdef double[:, ::1] cnt = cnt_arr
    cdef Py_ssize_t j, k, m, n, mmax, nmax
    cdef double x, p, pe, t, z
    with nogil:
        for j in range(min(pa, P)):
            mmax = min(pb, P - j)
            for k in range(min(qa, Q)):
                x = a[j, k]
                if x == 0.0:
                    continue
                nmax = min(qb, Q - k)
                for m in range(mmax):
                    for n in range(nmax):
                        p = x * b[m, n]
                        pe = fma(x, b[m, n], -p)
                        t = s[j + m, k + n] + p
                        z = t - s[j + m, k + n]
                        c[j + m, k + n] += ((s[j + m, k + n] - (t - z)) + (p - z)) + pe
                        s[j + m, k + n] = t
                        ab[j + m, k + n] += fabs(p)
                        cnt[j + m, k + n] += 1.0
        for m in range(P):
            for n in range(Q):
                s[m, n] = s[m, n] + c[m, n]
    return val_arr, abs_arr, cnt_arr


def lorenz_taylor(const double[:, ::1] a0, const double[:, ::1] b0, const double[:, ::1] c0,
                  Py_ssize_t M, double L, double sigma, double rho, double beta):
    """Time-Taylor recursion of the Lorenz field for a spatial series arc.

    The inputs are (1, N+1) rows; output arrays have shape (M+1, N+1).
    """
    cdef Py_ssize_t N1 = a0.shape[1]
    A_arr = np.zeros((M + 1, N1))
    B_arr = np.zeros((M + 1, N1))
    C_arr = np.zeros((M + 1, N1))
    cdef double[:, ::1] A = A_arr
    cdef double[:, ::1] B = B_arr
    cdef double[:, ::1] C = C_arr
    cdef Py_ssize_t m, i, k, n
    cdef double ac, abp, f, x
    for n in range(N1):
        A[0, n] = a0[0, n]
        B[0, n] = b0[0, n]
        C[0, n] = c0[0, n]
    with nogil:
        for m in range(M):
            f = L / (m + 1)
            for n in range(N1):
                ac = 0.0
                abp = 0.0
                for i in range(m + 1):
                    for k in range(n + 1):
                        x = A[i, k]
                        ac += x * C[m - i, n - k]
                        abp += x * B[m - i, n - k]
                A[m + 1, n] = f * (sigma * (B[m, n] - A[m, n]))
                B[m + 1, n] = f * ((rho * A[m, n] - ac) - B[m, n])
                C[m + 1, n] = f * (abp - beta * C[m, n])
    return A_arr, B_arr, C_arr


def dot2_matmul(const double[:, ::1] a, const double[:, ::1] b):
    """Compensated product a @ b; returns ``(value, abs_sum)``."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    val_arr = np.zeros((n, m))
    abs_arr = np.zeros((n, m))
    cdef double[:, ::1] val = val_arr
    cdef double[:, ::1] ab = abs_arr
    cdef Py_ssize_t i, j, l
    cdef double s, c, p, pe, t, z, acc
    with nogil:
        for i in range(n):
            for j in range(m):
                s = 0.0
                c = 0.0
                acc = 0.0
                for l in range(k):
                    p = a[i, l] * b[l, j]
                    pe = fma(a[i, l], b[l, j], -p)
                    t = s + p
                    z = t - s
                    c += ((s - (t - z)) + (p - z)) + pe
                    s = t
                    acc += fabs(p)
                val[i, j] = s + c
                ab[i, j] = acc
    return val_arr, abs_arr
