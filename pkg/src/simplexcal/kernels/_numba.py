"""Numba-compiled twins of the kernels in ``_numpy.py``.

Loops are kept serial and fastmath is left off so results are deterministic
and agree with the reference path to float noise.
"""

import math

import numpy as np
from numba import njit

_U_FLOOR = 1e-300


@njit(cache=True)
def logsumexp_rows(x):
    n, k = x.shape
    out = np.empty(n)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            s += math.exp(x[i, j] - m)
        out[i] = m + math.log(s)
    return out


@njit(cache=True)
def softmax_rows(x):
    n, k = x.shape
    out = np.empty((n, k))
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(k):
            out[i, j] /= s
    return out


@njit(cache=True)
def softplus_arr(x):
    out = np.empty(x.shape)
    flat_in = x.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.shape[0]):
        v = flat_in[i]
        hi = v if v > 0.0 else 0.0
        flat_out[i] = hi + math.log1p(math.exp(-abs(v)))
    return out


@njit(cache=True)
def concrete_draws(log_alpha, lam, uniforms):
    n, k = uniforms.shape
    out = np.empty((n, k))
    for i in range(n):
        m = -1e308
        for j in range(k):
            u = uniforms[i, j]
            if u < _U_FLOOR:
                u = _U_FLOOR
            g = -math.log(-math.log(u))
            z = (log_alpha[j] + g) / lam
            out[i, j] = z
            if z > m:
                m = z
        s = 0.0
        for j in range(k):
            e = math.exp(out[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(k):
            out[i, j] /= s
    return out


@njit(cache=True)
def concrete_log_density_rows(pis, log_alpha, lam):
    n, k = pis.shape
    sum_log_alpha = 0.0
    for j in range(k):
        sum_log_alpha += log_alpha[j]
    const = math.lgamma(k) + (k - 1) * math.log(lam) + sum_log_alpha
    out = np.empty(n)
    for i in range(n):
        sum_log_pi = 0.0
        m = -1e308
        for j in range(k):
            lp = math.log(pis[i, j])
            sum_log_pi += lp
            t = log_alpha[j] - lam * lp
            if t > m:
                m = t
        s = 0.0
        for j in range(k):
            s += math.exp(log_alpha[j] - lam * math.log(pis[i, j]) - m)
        lse = m + math.log(s)
        out[i] = const - (lam + 1.0) * sum_log_pi - k * lse
    return out


@njit(cache=True)
def mc_mean_rows(log_alpha, lam, uniforms):
    n, p, k = uniforms.shape
    out = np.zeros((n, k))
    z = np.empty(k)
    for i in range(n):
        for j in range(p):
            m = -1e308
            for c in range(k):
                u = uniforms[i, j, c]
                if u < _U_FLOOR:
                    u = _U_FLOOR
                g = -math.log(-math.log(u))
                v = (log_alpha[i, c] + g) / lam[i]
                z[c] = v
                if v > m:
                    m = v
            s = 0.0
            for c in range(k):
                e = math.exp(z[c] - m)
                z[c] = e
                s += e
            for c in range(k):
                out[i, c] += z[c] / s
        for c in range(k):
            out[i, c] /= p
    return out
