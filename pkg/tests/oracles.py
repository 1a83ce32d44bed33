"""Straight-line reference implementations used as test oracles.

Written independently of the package: explicit loops, full complex FFT,
scalar mel arithmetic and scipy's DCT.
"""

import math

import numpy as np
from scipy.fft import dct


def slaney_mel(f):
    if f < 1000.0:
        return 3.0 * f / 200.0
    return 15.0 + 27.0 * math.log(f / 1000.0) / math.log(6.4)


def slaney_hz(m):
    if m < 15.0:
        return 200.0 * m / 3.0
    return 1000.0 * 6.4 ** ((m - 15.0) / 27.0)


def periodogram(x, n_fft=2048, hop=1024):
    win = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n_fft) for i in range(n_fft)])
    rows = []
    start = 0
    while start + n_fft <= len(x):
        spec = np.fft.fft(x[start : start + n_fft] * win)[: n_fft // 2 + 1]
        rows.append(np.abs(spec) ** 2)
        start += hop
    return np.array(rows)


def mel_weights(rate, n_fft=2048, n_mels=128):
    lo, hi = slaney_mel(0.0), slaney_mel(rate / 2.0)
    edges = [slaney_hz(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    w = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_fft // 2 + 1):
            f = k * rate / n_fft
            if left < f <= center:
                w[m, k] = (f - left) / (center - left)
            elif center < f < right:
                w[m, k] = (right - f) / (right - center)
        w[m] *= 2.0 / (right - left)
    return w


def regression_delta(c, width=9):
    half = width // 2
    n = len(c)
    denom = 2 * sum(k * k for k in range(1, half + 1))
    out = np.zeros_like(c)
    for t in range(n):
        acc = 0.0
        for k in range(1, half + 1):
            acc = acc + k * (c[min(t + k, n - 1)] - c[max(t - k, 0)])
        out[t] = acc / denom
    return out


def mfcc_d(x, rate, n_mfcc=128):
    pw = periodogram(x)
    logmel = np.log(pw @ mel_weights(rate).T + 1e-10)
    c = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_mfcc]
    return np.hstack([c, regression_delta(c)])
