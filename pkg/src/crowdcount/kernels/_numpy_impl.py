"""Vectorized numpy kernels (im2col / stride-trick formulations).

Fast path backed by BLAS; must agree with the direct loop kernels in
``_numba_impl`` to 1e-5 relative in 32-bit (checked in the test suite).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward_padded(xp, w, b, h_out, w_out):
    k_h, k_w = w.shape[2], w.shape[3]
    patches = sliding_window_view(xp, (k_h, k_w), axis=(2, 3))
    # patches: (N, C_in, H_out, W_out, K_h, K_w)
    y = np.tensordot(patches, w, axes=([1, 4, 5], [1, 2, 3]))
    y = np.ascontiguousarray(np.moveaxis(y, 3, 1))
    y += b[None, :, None, None]
    return y


def conv2d_backward_padded(xp, w, gy):
    c_out, c_in, k_h, k_w = w.shape

    gb = gy.sum(axis=(0, 2, 3)).astype(xp.dtype)

    patches = sliding_window_view(xp, (k_h, k_w), axis=(2, 3))
    # gw[o,c,u,v] = sum_{n,i,j} gy[n,o,i,j] * xp[n,c,i+u,j+v]
    gw = np.tensordot(gy, patches, axes=([0, 2, 3], [0, 2, 3])).astype(xp.dtype)

    # full correlation of gy with the spatially flipped kernels
    gy_pad = np.pad(
        gy, ((0, 0), (0, 0), (k_h - 1, k_h - 1), (k_w - 1, k_w - 1))
    )
    gpatches = sliding_window_view(gy_pad, (k_h, k_w), axis=(2, 3))
    w_flip = w[:, :, ::-1, ::-1]
    gxp = np.tensordot(gpatches, w_flip, axes=([1, 4, 5], [0, 2, 3]))
    gxp = np.ascontiguousarray(np.moveaxis(gxp, 3, 1)).astype(xp.dtype)
    return gxp, gw, gb


_POOL_OFFSETS = [(0, 0), (0, 1), (1, 0), (1, 1)]


def maxpool2x2_forward_even(x):
    n, c, h, w = x.shape
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2)
    # stack window elements in row-major order so argmax ties break low
    stack = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = stack.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(stack, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward_even(gy, idx, h, w):
    n, c, h2, w2 = gy.shape
    gx = np.zeros((n, c, h, w), gy.dtype)
    ii, jj = np.meshgrid(np.arange(h2), np.arange(w2), indexing="ij")
    rows = 2 * ii[None, None] + idx // 2
    cols = 2 * jj[None, None] + idx % 2
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gx, (nn, cc, rows, cols), gy)
    return gx


def sum_pool_impl(x, factor):
    n, c, h, w = x.shape
    return (
        x.reshape(n, c, h // factor, factor, w // factor, factor)
        .sum(axis=(3, 5))
        .astype(x.dtype)
    )
