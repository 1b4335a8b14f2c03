"""Forward and backward kernels.

The ``*_forward`` / ``*_backward`` kernels work on channels-last (N, H, W, C)
arrays, which keeps the im2col copies contiguous. Convolution weights use
the (F, C, kH, kW) layout and transposed-convolution weights (C_in, C_out,
2, 2). Every forward returns ``(output, cache)``; the matching backward takes
the upstream gradient and that cache. Arithmetic runs in the dtype of the
inputs. ``conv2d``, ``conv_transpose2d`` and ``group_norm`` are NCHW
conveniences over the same kernels.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import IndivisibleGroups, ShapeMismatch


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ShapeMismatch(f"{name} must be rank-4, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _weight_matrix(weight):
    """(F, C, k, k) -> (F, k*k*C), matching the im2col column order."""
    f = weight.shape[0]
    return weight.transpose(0, 2, 3, 1).reshape(f, -1)


def _im2col(x, k, stride, pad):
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # (N, Ho, Wo, C, k, k) -> (N*Ho*Wo, k*k*C)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    return cols, ho, wo


def conv2d_forward(x, weight, bias, stride=1, pad=1):
    """Cross-correlation of NHWC ``x`` with a (F, C, k, k) kernel."""
    _check4(x)
    f, c, k, k2 = weight.shape
    if k != k2 or x.shape[3] != c:
        raise ShapeMismatch(f"conv weight {weight.shape} does not fit NHWC input {x.shape}")
    if bias is not None and bias.shape != (f,):
        raise ShapeMismatch(f"conv bias {bias.shape} does not match {f} filters")
    n = x.shape[0]
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ _weight_matrix(weight).T
    if bias is not None:
        out += bias
    return out.reshape(n, ho, wo, f), (cols, x.shape, weight, stride, pad)


def conv2d_backward_input(dy, weight, x_shape, stride=1, pad=1):
    """Adjoint of the convolution with respect to its input."""
    n, h, w, c = x_shape
    f, _, k, _ = weight.shape
    if stride == 1 and 2 * pad == k - 1:
        # "Same" convolution: the adjoint correlates with the flipped,
        # channel-swapped kernel.
        flipped = np.ascontiguousarray(weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        return conv2d_forward(dy, flipped, None, 1, k - 1 - pad)[0]
    ho, wo = dy.shape[1], dy.shape[2]
    dcols = (dy.reshape(-1, f) @ _weight_matrix(weight)).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
    return dxp[:, pad : pad + h, pad : pad + w]


def conv2d_backward(dy, cache):
    cols, x_shape, weight, stride, pad = cache
    f, c, k, _ = weight.shape
    dout = dy.reshape(-1, f)
    dw = (dout.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
    db = dout.sum(axis=0)
    dx = conv2d_backward_input(dy, weight, x_shape, stride, pad)
    return dx, np.ascontiguousarray(dw), db


def conv_transpose2d_forward(x, weight, bias):
    """2x2, stride-2 transposed convolution of NHWC ``x``.

    The footprints do not overlap, so this is one matrix product per pixel:
    ``y[n, 2i+a, 2j+b, f] = sum_c x[n, i, j, c] * w[c, f, a, b] + bias[f]``.
    """
    _check4(x)
    c, f, kh, kw = weight.shape
    if (kh, kw) != (2, 2) or x.shape[3] != c:
        raise ShapeMismatch(f"transposed conv weight {weight.shape} does not fit {x.shape}")
    n, h, w, _ = x.shape
    xr = x.reshape(-1, c)
    wmat = weight.transpose(0, 2, 3, 1).reshape(c, 4 * f)
    out = (xr @ wmat).reshape(n, h, w, 2, 2, f)
    y = out.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, f)
    if bias is not None:
        y = y + bias
    return y, (xr, x.shape, weight)


def conv_transpose2d_backward(dy, cache):
    xr, x_shape, weight = cache
    n, h, w, c = x_shape
    f = weight.shape[1]
    dyr = dy.reshape(n, h, 2, w, 2, f).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * f)
    wmat = weight.transpose(0, 2, 3, 1).reshape(c, 4 * f)
    dw = (xr.T @ dyr).reshape(c, 2, 2, f).transpose(0, 3, 1, 2)
    db = dy.reshape(-1, f).sum(axis=0)
    dx = (dyr @ wmat.T).reshape(n, h, w, c)
    return dx, np.ascontiguousarray(dw), db


def _group_mean(per_channel, groups):
    """(N, C) per-channel means -> (N, 1, C) means of each channel's group."""
    n, c = per_channel.shape
    g = per_channel.reshape(n, groups, c // groups).mean(axis=2)
    return np.repeat(g, c // groups, axis=1)[:, None, :]


def group_norm_forward(x, gamma, beta, groups, eps=1e-5):
    """Per-sample, per-group standardization with the biased variance."""
    _check4(x)
    n, h, w, c = x.shape
    if c % groups:
        raise IndivisibleGroups(f"{c} channels cannot be split into {groups} groups")
    xf = x.reshape(n, h * w, c)
    # Sums over the contiguous pixel axis first, then over group members.
    mean = _group_mean(xf.mean(axis=1), groups)
    d = xf - mean
    var = _group_mean(np.einsum("npc,npc->nc", d, d) / (h * w), groups)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (d * rstd).reshape(n, h, w, c)
    return xhat * gamma + beta, (xhat, rstd, gamma, groups)


def group_norm_backward(dy, cache):
    xhat, rstd, gamma, groups = cache
    n, h, w, c = dy.shape
    dyf = dy.reshape(n, h * w, c)
    xh = xhat.reshape(n, h * w, c)
    dgamma_nc = np.einsum("npc,npc->nc", dyf, xh)
    dbeta_nc = dyf.sum(axis=1)
    # With dxhat = dy * gamma, the group means reduce to per-channel sums.
    m1 = _group_mean(dbeta_nc * gamma / (h * w), groups)
    m2 = _group_mean(dgamma_nc * gamma / (h * w), groups)
    dx = rstd * (dyf * gamma - m1 - xh * m2)
    return dx.reshape(n, h, w, c), dgamma_nc.sum(axis=0), dbeta_nc.sum(axis=0)


_MISH_CLIP = 20.0


def mish_forward(x):
    """x * tanh(softplus(x)).

    Uses tanh(log(1 + e)) = e(e + 2) / (e(e + 2) + 2) with e = exp(x); x is
    clipped at 20 before exponentiating, where tanh(softplus) is 1 to
    within one ulp of float64.
    """
    e = np.exp(np.minimum(x, _MISH_CLIP))
    q = e * (e + 2.0)
    t = q / (q + 2.0)
    return x * t, (x, t, e)


def mish_backward(dy, cache):
    x, t, e = cache
    sig = e / (1.0 + e)
    return dy * (t + x * (1.0 - t * t) * sig)


def mish(x):
    return mish_forward(np.asarray(x))[0]


def sum_channels(pred):
    """Cell prediction: (N, C, H, W) -> (N, 1, H, W) channel sum."""
    return pred.sum(axis=1, keepdims=True)


def sum_channels_backward(dy, channels):
    """Every channel receives the upstream gradient of the sum."""
    return np.repeat(dy, channels, axis=1)


# NCHW conveniences -------------------------------------------------------

def _nhwc(x):
    return np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))


def _nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv2d(x, weight, bias=None, stride=1, pad=1):
    _check4(np.asarray(x))
    return _nchw(conv2d_forward(_nhwc(x), weight, bias, stride, pad)[0])


def conv2d_transpose_input(y, weight, x_shape, stride=1, pad=1):
    """NCHW adjoint of :func:`conv2d` (no bias) for an input of ``x_shape``."""
    n, c, h, w = x_shape
    return _nchw(conv2d_backward_input(_nhwc(y), weight, (n, h, w, c), stride, pad))


def conv_transpose2d(x, weight, bias=None):
    _check4(np.asarray(x))
    return _nchw(conv_transpose2d_forward(_nhwc(x), weight, bias)[0])


def group_norm(x, gamma, beta, groups, eps=1e-5):
    _check4(np.asarray(x))
    return _nchw(group_norm_forward(_nhwc(x), gamma, beta, groups, eps)[0])
