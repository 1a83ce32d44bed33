"""Pure-numpy GRU recurrence kernels.

Same contract as the compiled ``_kernels`` module. Arrays are time-major:
``gx`` (T, B, 3H) holds the input projections plus input bias, ``mask``
(T, B) is 1 for valid frames.
"""

import numpy as np


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


def gru_forward(gx, w_hh, b_hh, mask, h0, reverse):
    t_len, b, h3 = gx.shape
    h = h3 // 3
    hs = np.empty((t_len, b, h), dtype=gx.dtype)
    r = np.empty_like(hs)
    z = np.empty_like(hs)
    n = np.empty_like(hs)
    ghn = np.empty_like(hs)
    w_t = w_hh.T
    state = h0.copy()
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in steps:
        gh = state @ w_t + b_hh
        g = gx[t]
        r[t] = _sigmoid(g[:, :h] + gh[:, :h])
        z[t] = _sigmoid(g[:, h : 2 * h] + gh[:, h : 2 * h])
        ghn[t] = gh[:, 2 * h :]
        n[t] = np.tanh(g[:, 2 * h :] + r[t] * ghn[t])
        new = (1 - z[t]) * n[t] + z[t] * state
        state = np.where(mask[t][:, None] > 0, new, state)
        hs[t] = state
    return hs, r, z, n, ghn


def gru_backward(dhs, w_hh, mask, h0, hs, r, z, n, ghn, reverse):
    t_len, b, h = hs.shape
    dgx = np.empty((t_len, b, 3 * h), dtype=hs.dtype)
    dgh = np.empty_like(dgx)
    dh = np.zeros((b, h), dtype=hs.dtype)
    steps = range(t_len) if reverse else range(t_len - 1, -1, -1)
    for t in steps:
        dh = dh + dhs[t]
        if reverse:
            prev = hs[t + 1] if t + 1 < t_len else h0
        else:
            prev = hs[t - 1] if t > 0 else h0
        m = mask[t][:, None]
        dnew = m * dh
        dprev = (1 - m) * dh + z[t] * dnew
        dn = dnew * (1 - z[t])
        dz = dnew * (prev - n[t])
        dan = dn * (1 - n[t] * n[t])
        dr = dan * ghn[t]
        dar = dr * r[t] * (1 - r[t])
        daz = dz * z[t] * (1 - z[t])
        dgx[t, :, :h] = dar
        dgx[t, :, h : 2 * h] = daz
        dgx[t, :, 2 * h :] = dan
        dgh[t, :, :h] = dar
        dgh[t, :, h : 2 * h] = daz
        dgh[t, :, 2 * h :] = dan * r[t]
        dh = dprev + dgh[t] @ w_hh
    return dgx, dgh, dh
