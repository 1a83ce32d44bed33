# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU recurrence kernels (BLAS for the hidden projection).

Contract identical to ``omoq.autodiff._fallback``.
"""

import numpy as np

from libc.math cimport exp, expf, fabs
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef inline real _exp(real x) noexcept nogil:
    if real is float:
        return expf(x)
    else:
        return exp(x)


cdef inline real _tanh(real x) noexcept nogil:
    # one exp per call; libm tanh is several times slower here
    cdef real a = fabs(x), x2, e, y
    if a < <real>0.02:
        # series avoids cancellation in 1 - e for small |x|
        x2 = x * x
        return x * (1 + x2 * (<real>(-1. / 3) + x2 * (<real>(2. / 15) + x2 * <real>(-17. / 315))))
    if a > 20:
        y = 1
    else:
        e = _exp(-2 * a)
        y = (1 - e) / (1 + e)
    return y if x > 0 else -y


cdef inline real _sigmoid(real x) noexcept nogil:
    return <real>1 / (<real>1 + _exp(-x))


cdef inline void _gemm(char *ta, char *tb, int m, int n, int k, real alpha, real *a, int lda,
                       real *b, int ldb, real beta, real *c, int ldc) noexcept nogil:
    # Column-major BLAS call; callers pass row-major buffers as transposes.
    if real is float:
        sgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def gru_forward(real[:, :, ::1] gx, real[:, ::1] w_hh, real[::1] b_hh, real[:, ::1] mask,
                real[:, ::1] h0, bint reverse):
    cdef Py_ssize_t t_len = gx.shape[0], nb = gx.shape[1], h = gx.shape[2] // 3
    dtype = np.float32 if real is float else np.float64
    hs_arr = np.empty((t_len, nb, h), dtype=dtype)
    r_arr = np.empty_like(hs_arr)
    z_arr = np.empty_like(hs_arr)
    n_arr = np.empty_like(hs_arr)
    ghn_arr = np.empty_like(hs_arr)
    state_arr = np.array(h0, dtype=dtype, copy=True)
    gh_arr = np.empty((nb, 3 * h), dtype=dtype)
    cdef real[:, :, ::1] hs = hs_arr, r = r_arr, z = z_arr, n = n_arr, ghn = ghn_arr
    cdef real[:, ::1] state = state_arr, gh = gh_arr
    cdef Py_ssize_t s, t, i, j
    cdef real rt, zt, nt, hn, new
    cdef int hh = <int>h, h3 = <int>(3 * h), ib = <int>nb
    if t_len == 0:
        return hs_arr, r_arr, z_arr, n_arr, ghn_arr
    with nogil:
        for s in range(t_len):
            t = t_len - 1 - s if reverse else s
            # gh = state @ w_hh.T
            _gemm(b"T", b"N", h3, ib, hh, <real>1, &w_hh[0, 0], hh, &state[0, 0], hh, <real>0, &gh[0, 0], h3)
            for i in range(nb):
                for j in range(h):
                    rt = _sigmoid(gx[t, i, j] + gh[i, j] + b_hh[j])
                    zt = _sigmoid(gx[t, i, h + j] + gh[i, h + j] + b_hh[h + j])
                    hn = gh[i, 2 * h + j] + b_hh[2 * h + j]
                    nt = _tanh(gx[t, i, 2 * h + j] + rt * hn)
                    r[t, i, j] = rt
                    z[t, i, j] = zt
                    n[t, i, j] = nt
                    ghn[t, i, j] = hn
                    if mask[t, i] > 0:
                        state[i, j] = (1 - zt) * nt + zt * state[i, j]
            memcpy(&hs[t, 0, 0], &state[0, 0], nb * h * sizeof(real))
    return hs_arr, r_arr, z_arr, n_arr, ghn_arr


def gru_backward(real[:, :, ::1] dhs, real[:, ::1] w_hh, real[:, ::1] mask, real[:, ::1] h0,
                 real[:, :, ::1] hs, real[:, :, ::1] r, real[:, :, ::1] z, real[:, :, ::1] n,
                 real[:, :, ::1] ghn, bint reverse):
    cdef Py_ssize_t t_len = hs.shape[0], nb = hs.shape[1], h = hs.shape[2]
    dtype = np.float32 if real is float else np.float64
    dgx_arr = np.empty((t_len, nb, 3 * h), dtype=dtype)
    dgh_arr = np.empty_like(dgx_arr)
    dh_arr = np.zeros((nb, h), dtype=dtype)
    cdef real[:, :, ::1] dgx = dgx_arr, dgh = dgh_arr
    cdef real[:, ::1] dh = dh_arr
    cdef Py_ssize_t s, t, i, j
    cdef real m, d, dnew, prev, dn, dz, dan, dar, daz, rt, zt, nt
    cdef int hh = <int>h, h3 = <int>(3 * h), ib = <int>nb
    cdef bint first
    with nogil:
        for s in range(t_len):
            t = s if reverse else t_len - 1 - s
            first = (t == t_len - 1) if reverse else (t == 0)
            for i in range(nb):
                m = mask[t, i]
                for j in range(h):
                    d = dh[i, j] + dhs[t, i, j]
                    if first:
                        prev = h0[i, j]
                    elif reverse:
                        prev = hs[t + 1, i, j]
                    else:
                        prev = hs[t - 1, i, j]
                    rt = r[t, i, j]
                    zt = z[t, i, j]
                    nt = n[t, i, j]
                    dnew = m * d
                    dn = dnew * (1 - zt)
                    dz = dnew * (prev - nt)
                    dan = dn * (1 - nt * nt)
                    dar = dan * ghn[t, i, j] * rt * (1 - rt)
                    daz = dz * zt * (1 - zt)
                    dgx[t, i, j] = dar
                    dgx[t, i, h + j] = daz
                    dgx[t, i, 2 * h + j] = dan
                    dgh[t, i, j] = dar
                    dgh[t, i, h + j] = daz
                    dgh[t, i, 2 * h + j] = dan * rt
                    dh[i, j] = (1 - m) * d + zt * dnew
            # dh += dgh[t] @ w_hh
            _gemm(b"N", b"N", hh, ib, h3, <real>1, &w_hh[0, 0], hh, &dgh[t, 0, 0], h3, <real>1, &dh[0, 0], hh)
    return dgx_arr, dgh_arr, dh_arr
