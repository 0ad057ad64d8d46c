"""Direct (naive-loop) kernels compiled with numba.

This is the reference path: every accumulation is a plain sequential
loop in a fixed order (channel, kernel row, kernel col), so results are
bit-reproducible and match a hand-written Python loop oracle exactly.
The vectorized numpy path in ``_numpy_impl`` must agree with these
kernels to 1e-5 relative in 32-bit.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward_padded(xp, w, b, h_out, w_out):
    n_batch, _, _, _ = xp.shape
    c_out, c_in, k_h, k_w = w.shape
    y = np.empty((n_batch, c_out, h_out, w_out), xp.dtype)
    for n in range(n_batch):
        for o in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = b[o]
                    for c in range(c_in):
                        for u in range(k_h):
                            for v in range(k_w):
                                acc += w[o, c, u, v] * xp[n, c, i + u, j + v]
                    y[n, o, i, j] = acc
    return y


@njit(cache=True)
def conv2d_backward_padded(xp, w, gy):
    n_batch, c_in, h_p, w_p = xp.shape
    c_out, _, k_h, k_w = w.shape
    _, _, h_out, w_out = gy.shape

    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    gb = np.zeros(c_out, xp.dtype)

    for o in range(c_out):
        for n in range(n_batch):
            for i in range(h_out):
                for j in range(w_out):
                    gb[o] += gy[n, o, i, j]

    for o in range(c_out):
        for c in range(c_in):
            for u in range(k_h):
                for v in range(k_w):
                    acc = 0.0
                    for n in range(n_batch):
                        for i in range(h_out):
                            for j in range(w_out):
                                acc += gy[n, o, i, j] * xp[n, c, i + u, j + v]
                    gw[o, c, u, v] = acc

    for n in range(n_batch):
        for c in range(c_in):
            for o in range(c_out):
                for i in range(h_out):
                    for j in range(w_out):
                        g = gy[n, o, i, j]
                        for u in range(k_h):
                            for v in range(k_w):
                                gxp[n, c, i + u, j + v] += w[o, c, u, v] * g
    return gxp, gw, gb


@njit(cache=True)
def maxpool2x2_forward_even(x):
    n_batch, c_ch, h, w = x.shape
    h2, w2 = h // 2, w // 2
    y = np.empty((n_batch, c_ch, h2, w2), x.dtype)
    idx = np.empty((n_batch, c_ch, h2, w2), np.int8)
    for n in range(n_batch):
        for c in range(c_ch):
            for i in range(h2):
                for j in range(w2):
                    best = x[n, c, 2 * i, 2 * j]
                    arg = 0
                    k = 0
                    for u in range(2):
                        for v in range(2):
                            val = x[n, c, 2 * i + u, 2 * j + v]
                            # strict > keeps the lowest row-major index on ties
                            if val > best:
                                best = val
                                arg = k
                            k += 1
                    y[n, c, i, j] = best
                    idx[n, c, i, j] = arg
    return y, idx


@njit(cache=True)
def maxpool2x2_backward_even(gy, idx, h, w):
    n_batch, c_ch, h2, w2 = gy.shape
    gx = np.zeros((n_batch, c_ch, h, w), gy.dtype)
    for n in range(n_batch):
        for c in range(c_ch):
            for i in range(h2):
                for j in range(w2):
                    a = idx[n, c, i, j]
                    gx[n, c, 2 * i + a // 2, 2 * j + a % 2] += gy[n, c, i, j]
    return gx


@njit(cache=True)
def sum_pool_impl(x, factor):
    n_batch, c_ch, h, w = x.shape
    h2, w2 = h // factor, w // factor
    y = np.zeros((n_batch, c_ch, h2, w2), x.dtype)
    for n in range(n_batch):
        for c in range(c_ch):
            for i in range(h2):
                for j in range(w2):
                    acc = 0.0
                    for u in range(factor):
                        for v in range(factor):
                            acc += x[n, c, factor * i + u, factor * j + v]
                    y[n, c, i, j] = acc
    return y
