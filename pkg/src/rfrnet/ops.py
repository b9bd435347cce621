"""Differentiable primitives: convolutions, normalization, activations, shape ops.

Every op does its forward work in numpy, then hands the result to
``autodiff.record`` with a closure that maps the output gradient back onto the
inputs. Reductions keep numpy's fixed accumulation order, so identical inputs
produce bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    Tensor,
    as_tensor,
    needs_grad,
    record,
)


# ---------------------------------------------------------------------------
# im2col machinery shared by the convolution family


def conv_out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh, kw, stride, padding):
    """Unfold (n, c, h, w) into (n, c*kh*kw, L) patch columns."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, padding):
    """Adjoint of _im2col: scatter-add (n, c*kh*kw, L) columns back to (n, c, h, w)."""
    n, c, h, w = x_shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    return xp[:, :, padding : padding + h, padding : padding + w]


def _check_4d(t: Tensor, role):
    if t.data.ndim != 4:
        raise DimensionError(f"{role} must be rank 4 (n, c, h, w), got shape {t.data.shape}")


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation with zero padding. weight: (co, ci, kh, kw), bias: (co,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    n, ci, h, w = x.data.shape
    co, wci, kh, kw = weight.data.shape
    if wci != ci:
        raise DimensionError(f"conv2d channel axis mismatch: input has {ci}, weight expects {wci}")
    if kh < 1 or kw < 1 or stride < 1:
        raise DimensionError(f"conv2d kernel/stride must be >= 1, got k=({kh},{kw}) stride={stride}")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output size ({ho},{wo}) not positive for input ({h},{w})")

    cols, _, _ = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(co, -1)
    y = np.matmul(w2, cols)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (co,):
            raise DimensionError(f"conv2d bias axis mismatch: expected ({co},), got {bias.data.shape}")
        y = y + bias.data.reshape(1, co, 1)
    out = y.reshape(n, co, ho, wo)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(gy):
        gy2 = gy.reshape(n, co, ho * wo)
        gx = gw = gb = None
        if needs_grad(x):
            gcols = np.matmul(w2.T, gy2)
            gx = _col2im(gcols, x.data.shape, kh, kw, stride, padding)
        if needs_grad(weight):
            cols_b, _, _ = _im2col(x.data, kh, kw, stride, padding)
            gw = np.matmul(gy2, cols_b.swapaxes(1, 2)).sum(axis=0).reshape(weight.data.shape)
        if bias is not None and needs_grad(bias):
            gb = gy2.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(inputs, out, bwd, name="conv2d")


def transposed_conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Adjoint of conv2d with the same geometry. weight: (ci, co, kh, kw), x: (n, ci, h, w)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_4d(x, "transposed_conv2d input")
    _check_4d(weight, "transposed_conv2d weight")
    n, ci, h, w = x.data.shape
    wci, co, kh, kw = weight.data.shape
    if wci != ci:
        raise DimensionError(
            f"transposed_conv2d channel axis mismatch: input has {ci}, weight expects {wci}"
        )
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"transposed_conv2d output size ({ho},{wo}) not positive for input ({h},{w})"
        )

    w2 = weight.data.reshape(ci, co * kh * kw)
    x2 = x.data.reshape(n, ci, h * w)
    cols = np.matmul(w2.T, x2)
    out = _col2im(cols, (n, co, ho, wo), kh, kw, stride, padding)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (co,):
            raise DimensionError(
                f"transposed_conv2d bias axis mismatch: expected ({co},), got {bias.data.shape}"
            )
        out = out + bias.data.reshape(1, co, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(gy):
        gx = gw = gb = None
        cols_gy = None
        if needs_grad(x) or needs_grad(weight):
            cols_gy, _, _ = _im2col(gy, kh, kw, stride, padding)
        if needs_grad(x):
            gx = np.matmul(w2, cols_gy).reshape(n, ci, h, w)
        if needs_grad(weight):
            gw = np.matmul(x2, cols_gy.swapaxes(1, 2)).sum(axis=0).reshape(weight.data.shape)
        if bias is not None and needs_grad(bias):
            gb = gy.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(inputs, out, bwd, name="transposed_conv2d")


def batch_norm(x, gamma, beta, running_mean, running_var, mode="train", momentum=0.1, eps=1e-5):
    """Channel-wise normalization.

    train: normalize by batch statistics (biased variance) and update the
    running buffers in place. eval/frozen: normalize by running statistics;
    frozen additionally blocks gamma/beta gradients.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_4d(x, "batch_norm input")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"batch_norm gamma/beta must have shape ({c},), got {gamma.data.shape}/{beta.data.shape}"
        )
    count = n * h * w
    if count == 0:
        raise DimensionError(f"batch_norm channel has zero elements for input shape {x.data.shape}")
    if mode not in ("train", "eval", "frozen"):
        raise ContractError(f"batch_norm mode must be train/eval/frozen, got {mode!r}")

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data

    std = np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) / std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bwd(gy):
        gx = gg = gb = None
        g = gamma.data.reshape(1, c, 1, 1)
        if needs_grad(x):
            if mode == "train":
                # differentiate through the batch statistics
                sum_gy = gy.sum(axis=(0, 2, 3), keepdims=True)
                sum_gy_xhat = (gy * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (g / std.reshape(1, c, 1, 1)) / count * (
                    count * gy - sum_gy - xhat * sum_gy_xhat
                )
            else:
                gx = gy * g / std.reshape(1, c, 1, 1)
        if mode != "frozen":
            if needs_grad(gamma):
                gg = (gy * xhat).sum(axis=(0, 2, 3))
            if needs_grad(beta):
                gb = gy.sum(axis=(0, 2, 3))
        return gx, gg, gb

    return record((x, gamma, beta), out, bwd, name="batch_norm")


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, fwd, bwd_a, bwd_b, name):
    a, b = as_tensor(a), as_tensor(b)
    out = fwd(a.data, b.data)

    def bwd(gy):
        ga = _unbroadcast(bwd_a(gy, a.data, b.data), a.data.shape) if needs_grad(a) else None
        gb = _unbroadcast(bwd_b(gy, a.data, b.data), b.data.shape) if needs_grad(b) else None
        return ga, gb

    return record((a, b), out, bwd, name=name)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b):
    return _binary(
        a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y), "div"
    )


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def bwd(gy):
        return ((gy * (x.data > 0)) if needs_grad(x) else None,)

    return record((x,), out, bwd, name="relu")


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    out = np.where(x.data > 0, x.data, slope * x.data)

    def bwd(gy):
        return ((gy * np.where(x.data > 0, 1.0, slope).astype(gy.dtype)) if needs_grad(x) else None,)

    return record((x,), out, bwd, name="leaky_relu")


def sigmoid(x):
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(gy):
        return ((gy * out * (1.0 - out)) if needs_grad(x) else None,)

    return record((x,), out, bwd, name="sigmoid")


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bwd(gy):
        return ((gy / (2.0 * out)) if needs_grad(x) else None,)

    return record((x,), out, bwd, name="sqrt")


def clamp_min(x, floor):
    """max(x, floor); clamped positions pass no gradient."""
    x = as_tensor(x)
    out = np.maximum(x.data, floor)

    def bwd(gy):
        return ((gy * (x.data > floor)) if needs_grad(x) else None,)

    return record((x,), out, bwd, name="clamp_min")


def absolute(x):
    x = as_tensor(x)
    out = np.abs(x.data)

    def bwd(gy):
        return ((gy * np.sign(x.data)) if needs_grad(x) else None,)

    return record((x,), out, bwd, name="abs")


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(gy):
        return ((gy.reshape(x.data.shape)) if needs_grad(x) else None,)

    return record((x,), out, bwd, name="reshape")


def concat(tensors, axis=1):
    ts = [as_tensor(t) for t in tensors]
    base = list(ts[0].data.shape)
    for t in ts[1:]:
        other = list(t.data.shape)
        if len(other) != len(base) or any(
            o != b for ax, (o, b) in enumerate(zip(other, base)) if ax != axis
        ):
            raise DimensionError(
                f"concat shapes incompatible off axis {axis}: {base} vs {other}"
            )
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(gy):
        gs = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if needs_grad(t):
                idx = [slice(None)] * gy.ndim
                idx[axis] = slice(lo, hi)
                gs.append(gy[tuple(idx)])
            else:
                gs.append(None)
        return tuple(gs)

    return record(tuple(ts), out, bwd, name="concat")


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(gy):
        if not needs_grad(x):
            return (None,)
        g = gy
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return record((x,), np.asarray(out), bwd, name="sum")


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bwd(gy):
        if not needs_grad(x):
            return (None,)
        g = gy / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return record((x,), np.asarray(out), bwd, name="mean")


def softmax(x, axis):
    """Numerically stable softmax; outputs sum to 1 along axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(gy):
        if not needs_grad(x):
            return (None,)
        dot = (gy * out).sum(axis=axis, keepdims=True)
        return (out * (gy - dot),)

    return record((x,), out, bwd, name="softmax")


def swap_last2(x):
    """Transpose the last two axes."""
    x = as_tensor(x)
    out = np.ascontiguousarray(x.data.swapaxes(-1, -2))

    def bwd(gy):
        return ((gy.swapaxes(-1, -2)) if needs_grad(x) else None,)

    return record((x,), out, bwd, name="swap_last2")


def matmul(a, b):
    """Batched matrix product over the last two axes; leading axes must match."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(
            f"matmul batch axes mismatch: {a.data.shape[:-2]} vs {b.data.shape[:-2]}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner axes mismatch: {a.data.shape[-1]} vs {b.data.shape[-2]}"
        )
    out = np.matmul(a.data, b.data)

    def bwd(gy):
        ga = np.matmul(gy, b.data.swapaxes(-1, -2)) if needs_grad(a) else None
        gb = np.matmul(a.data.swapaxes(-1, -2), gy) if needs_grad(b) else None
        return ga, gb

    return record((a, b), out, bwd, name="matmul")


# ---------------------------------------------------------------------------
# mask utilities (plain numpy; masks never carry gradient)


def window_valid_count(mask: np.ndarray, k, stride, padding) -> np.ndarray:
    """Per-window count of valid (==1) mask pixels. mask: (n, 1, h, w)."""
    cols, ho, wo = _im2col(mask, k, k, stride, padding)
    n = mask.shape[0]
    return cols.sum(axis=1).reshape(n, 1, ho, wo)


def nearest_downsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor downsample of (n, c, h, w) by an integer factor (top-left sample)."""
    if factor == 1:
        return x
    return np.ascontiguousarray(x[:, :, ::factor, ::factor])
