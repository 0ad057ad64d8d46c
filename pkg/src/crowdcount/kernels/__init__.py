"""Dense-tensor kernels with analytic gradients.

Tensors are plain numpy arrays in (batch, channels, height, width)
row-major layout; float32 for training/inference, float64 for gradient
checking. Convolution is cross-correlation (no kernel flip), stride 1.

Two interchangeable backends implement the hot loops:

* ``numba`` — direct naive loops (the reference; bit-reproducible and
  matching a Python loop oracle exactly),
* ``numpy`` — im2col/stride-trick formulation backed by BLAS (default;
  much faster on this kind of single-core host).

Select with the ``CROWDCOUNT_BACKEND`` environment variable or
:func:`set_backend`. ``benchmarks/backend_bench.py`` compares the two.
"""

import os
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import _numpy_impl

_BACKENDS = ("numpy", "numba")
_impl = None
_backend_name = None


def set_backend(name):
    """Select the kernel backend ("numpy" or "numba")."""
    global _impl, _backend_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}, expected one of {_BACKENDS}")
    if name == "numba":
        from . import _numba_impl

        _impl = _numba_impl
    else:
        _impl = _numpy_impl
    _backend_name = name


def get_backend():
    return _backend_name


set_backend(os.environ.get("CROWDCOUNT_BACKEND", "numpy"))


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one stride-1 convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    pad_h: int = 0
    pad_w: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError("kernel extents must be positive")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeError("padding must be non-negative")
        if self.stride != 1:
            raise ShapeError("only stride 1 is supported")

    def out_hw(self, h, w):
        h_out = (h + 2 * self.pad_h - self.kernel_h) // self.stride + 1
        w_out = (w + 2 * self.pad_w - self.kernel_w) // self.stride + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(
                f"kernel {self.kernel_h}x{self.kernel_w} with padding "
                f"({self.pad_h},{self.pad_w}) does not fit input {h}x{w}"
            )
        return h_out, w_out


def same_spec(in_channels, out_channels, k):
    """ConvSpec that preserves spatial extent (odd kernels only)."""
    if k % 2 == 0:
        raise ShapeError("same-padding requires an odd kernel size")
    return ConvSpec(in_channels, out_channels, k, k, pad_h=k // 2, pad_w=k // 2)


def require_nchw(x, name="tensor"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 (N,C,H,W) array")


def all_finite(x):
    """Validity scan: True iff every element is finite."""
    return bool(np.isfinite(x).all())


def _check_conv_args(x, w, b, spec):
    require_nchw(x, "input")
    if w.shape != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"weight shape {w.shape} does not match spec "
            f"({spec.out_channels},{spec.in_channels},{spec.kernel_h},{spec.kernel_w})"
        )
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} != ({spec.out_channels},)")


def _pad_input(x, spec):
    if spec.pad_h == 0 and spec.pad_w == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)))


def conv2d_forward(x, w, b, spec):
    """out[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * x_padded[n,c,i+u,j+v]."""
    _check_conv_args(x, w, b, spec)
    h_out, w_out = spec.out_hw(x.shape[2], x.shape[3])
    xp = _pad_input(x, spec)
    if b is None:
        b = np.zeros(spec.out_channels, x.dtype)
    return _impl.conv2d_forward_padded(xp, w, b.astype(x.dtype, copy=False), h_out, w_out)


def conv2d_backward(x, w, spec, grad_out):
    """Analytic gradients of conv2d_forward; returns (grad_x, grad_w, grad_b)."""
    _check_conv_args(x, w, None, spec)
    h_out, w_out = spec.out_hw(x.shape[2], x.shape[3])
    if grad_out.shape != (x.shape[0], spec.out_channels, h_out, w_out):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != "
            f"{(x.shape[0], spec.out_channels, h_out, w_out)}"
        )
    xp = _pad_input(x, spec)
    gxp, gw, gb = _impl.conv2d_backward_padded(xp, w, grad_out)
    if spec.pad_h or spec.pad_w:
        gx = gxp[
            :,
            :,
            spec.pad_h : gxp.shape[2] - spec.pad_h,
            spec.pad_w : gxp.shape[3] - spec.pad_w,
        ]
        gx = np.ascontiguousarray(gx)
    else:
        gx = gxp
    return gx, gw, gb


def elementwise_pow(x, q):
    """x**q by repeated multiplication (sign-correct for negative inputs)."""
    if q < 1:
        raise ValueError("power q must be >= 1")
    y = x.copy()
    for _ in range(q - 1):
        y *= x
    return y


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(y, grad_out):
    """y is the forward output tanh(x)."""
    return grad_out * (1.0 - y * y)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # gradient defined as 0 at exactly x == 0
    return np.where(x > 0, grad_out, 0)


def pad_replicate_to_even(x):
    """Replicate the last row/column so both spatial extents are even."""
    require_nchw(x)
    ph = x.shape[2] % 2
    pw = x.shape[3] % 2
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")


def pad_replicate_to_even_backward(grad_padded, in_shape):
    """Fold gradients of replicated cells back onto their source cells."""
    h, w = in_shape[2], in_shape[3]
    g = grad_padded
    if g.shape[3] == w + 1:
        g = g[:, :, :, :w].copy()
        g[:, :, :, w - 1] += grad_padded[:, :, : g.shape[2], w]
        grad_padded = g
    if g.shape[2] == h + 1:
        g2 = g[:, :, :h, :].copy()
        g2[:, :, h - 1, :] += g[:, :, h, :]
        g = g2
    return np.ascontiguousarray(g)


def maxpool2x2_forward(x):
    """2x2 non-overlapping max; odd extents replication-padded first.

    Returns (pooled, argmax) where argmax holds the row-major index
    (0..3) of the winner inside each window; ties break to the lowest.
    """
    require_nchw(x)
    xp = pad_replicate_to_even(x)
    return _impl.maxpool2x2_forward_even(xp)


def maxpool2x2_backward(grad_out, idx, in_shape):
    """Route each upstream gradient to its argmax position."""
    if grad_out.shape != idx.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != argmax shape {idx.shape}")
    hp = in_shape[2] + in_shape[2] % 2
    wp = in_shape[3] + in_shape[3] % 2
    gxp = _impl.maxpool2x2_backward_even(grad_out, idx, hp, wp)
    if (hp, wp) != (in_shape[2], in_shape[3]):
        return pad_replicate_to_even_backward(gxp, in_shape)
    return gxp


def concat_channels(xs):
    """Channel-dimension concatenation in argument order."""
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    for x in xs:
        require_nchw(x)
    base = xs[0]
    for x in xs[1:]:
        if x.shape[0] != base.shape[0] or x.shape[2:] != base.shape[2:]:
            raise ShapeError(
                f"concat inputs disagree on N/H/W: {base.shape} vs {x.shape}"
            )
    return np.concatenate(xs, axis=1)


def split_channels(grad_out, sizes):
    """Inverse of concat_channels (the backward pass)."""
    if sum(sizes) != grad_out.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {grad_out.shape[1]} channels")
    out = []
    start = 0
    for s in sizes:
        out.append(np.ascontiguousarray(grad_out[:, start : start + s]))
        start += s
    return out


def sum_pool(x, factor):
    """Non-overlapping factor x factor block sums (count-preserving)."""
    require_nchw(x)
    if factor < 1:
        raise ValueError("sum_pool factor must be >= 1")
    if factor == 1:
        return x.copy()
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(
            f"spatial extents {x.shape[2]}x{x.shape[3]} not divisible by {factor}"
        )
    return _impl.sum_pool_impl(x, factor)
