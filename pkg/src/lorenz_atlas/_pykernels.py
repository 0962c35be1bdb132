"""Pure numpy versions of the compiled kernels (same signatures)."""

import numpy as np

_SPLIT = 134217729.0


def conv2_trunc(a, b, P, Q):
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    out = np.zeros((P, Q))
    pa, qa = a.shape
    pb, qb = b.shape
    for j in range(min(pa, P)):
        mmax = min(pb, P - j)
        for k in range(min(qa, Q)):
            x = a[j, k]
            if x == 0.0:
                continue
            nmax = min(qb, Q - k)
            out[j:j + mmax, k:k + nmax] += x * b[:mmax, :nmax]
    return out


def _split(x):
    t = _SPLIT * x
    hi = t - (t - x)
    return hi, x - hi


def conv2_dot2(a, b, P, Q):
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    s = np.zeros((P, Q))
    c = np.zeros((P, Q))
    ab = np.zeros((P, Q))
    cnt = np.zeros((P, Q))
    pa, qa = a.shape
    pb, qb = b.shape
    bh_full, bl_full = _split(b)
    for j in range(min(pa, P)):
        mmax = min(pb, P - j)
        for k in range(min(qa, Q)):
            x = a[j, k]
            if x == 0.0:
                continue
            nmax = min(qb, Q - k)
            y = b[:mmax, :nmax]
            bh = bh_full[:mmax, :nmax]
            bl = bl_full[:mmax, :nmax]
            xh, xl = _split(x)
            p = x * y
            pe = ((xh * bh - p) + xh * bl + xl * bh) + xl * bl
            sv = s[j:j + mmax, k:k + nmax]
            t = sv + p
            z = t - sv
            c[j:j + mmax, k:k + nmax] += ((sv - (t - z)) + (p - z)) + pe
            s[j:j + mmax, k:k + nmax] = t
            ab[j:j + mmax, k:k + nmax] += np.abs(p)
            cnt[j:j + mmax, k:k + nmax] += 1.0
    return s + c, ab, cnt


def lorenz_taylor(a0, b0, c0, M, L, sigma, rho, beta):
    N1 = a0.shape[1]
    A = np.zeros((M + 1, N1))
    B = np.zeros((M + 1, N1))
    C = np.zeros((M + 1, N1))
    A[0], B[0], C[0] = a0[0], b0[0], c0[0]
    # lower-triangular Toeplitz matrices of the a-rows, built as rows appear
    Ta = np.zeros((M + 1, N1, N1))
    idx = np.subtract.outer(np.arange(N1), np.arange(N1))
    mask = idx >= 0
    for m in range(M):
        Ta[m][mask] = A[m][idx[mask]]
        ac = np.einsum("jkl,jl->k", Ta[:m + 1], C[m::-1])
        abp = np.einsum("jkl,jl->k", Ta[:m + 1], B[m::-1])
        f = L / (m + 1)
        A[m + 1] = f * (sigma * (B[m] - A[m]))
        B[m + 1] = f * ((rho * A[m] - ac) - B[m])
        C[m + 1] = f * (abp - beta * C[m])
    return A, B, C


def dot2_matmul(a, b):
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    n, k = a.shape
    m = b.shape[1]
    s = np.zeros((n, m))
    c = np.zeros((n, m))
    acc = np.zeros((n, m))
    bh_full, bl_full = _split(b)
    for l in range(k):
        x = a[:, l:l + 1]
        y = b[l:l + 1, :]
        xh, xl = _split(x)
        p = x * y
        pe = ((xh * bh_full[l:l + 1] - p) + xh * bl_full[l:l + 1] + xl * bh_full[l:l + 1]) + xl * bl_full[l:l + 1]
        t = s + p
        z = t - s
        c += ((s - (t - z)) + (p - z)) + pe
        s = t
        acc += np.abs(p)
    return s + c, acc
