"""Differentiable operations.

Every op builds its output through ``make_node`` with a closure returning the
parent gradients.  Binary ops broadcast under numpy rules and sum gradients
back to the parent shapes.
"""

from __future__ import annotations

import math

import numpy as np

from padm.gradkit.tensor import Tensor, as_tensor, make_node, unbroadcast


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data + b.data

    def grad_fn(g):
        return unbroadcast(g, a.data.shape), unbroadcast(g, b.data.shape)

    return make_node(data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data - b.data

    def grad_fn(g):
        return unbroadcast(g, a.data.shape), -unbroadcast(g, b.data.shape)

    return make_node(data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data * b.data

    def grad_fn(g):
        return (
            unbroadcast(g * b.data, a.data.shape),
            unbroadcast(g * a.data, b.data.shape),
        )

    return make_node(data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        return (-g,)

    return make_node(-a.data, (a,), grad_fn)


def matmul(a, b) -> Tensor:
    """Matrix product; stacked leading dims follow numpy matmul semantics."""
    a, b = _pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    data = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.data.shape), unbroadcast(gb, b.data.shape)

    return make_node(data, (a, b), grad_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def grad_fn(g):
        return (g * data,)

    return make_node(data, (a,), grad_fn)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / a.data

    def grad_fn(g):
        return (-g * data * data,)

    return make_node(data.astype(a.dtype, copy=False), (a,), grad_fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def grad_fn(g):
        return (g * (0.5 / data),)

    return make_node(data, (a,), grad_fn)


def absolute(a) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    data = np.abs(a.data)

    def grad_fn(g):
        return (g * np.sign(a.data),)

    return make_node(data, (a,), grad_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def grad_fn(g):
        return (g * (a.data > 0),)

    return make_node(data, (a,), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x * x * x)
    th = np.tanh(inner)
    data = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * d,)

    return make_node(data.astype(a.dtype, copy=False), (a,), grad_fn)


def softplus(a) -> Tensor:
    """log(1 + e^x), numerically stable on both tails."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def grad_fn(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return (g * sig,)

    return make_node(data.astype(a.dtype, copy=False), (a,), grad_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        return (data * (g - dot),)

    return make_node(data, (a,), grad_fn)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return make_node(np.asarray(data, dtype=a.dtype), (a,), grad_fn)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.data.shape),)

    return make_node(np.asarray(data, dtype=a.dtype), (a,), grad_fn)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(data, tuple(tensors), grad_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.data.shape),)

    return make_node(data, (a,), grad_fn)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return make_node(data, (a,), grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learned affine map.

    A constant input normalizes to zeros before the affine map.
    """
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = reciprocal(sqrt(add(var, np.asarray(eps, dtype=x.dtype))))
    return add(mul(mul(centered, inv), gain), bias)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) over the trailing feature axis."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    beg = total // 2
    return beg, total - beg


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """2-D convolution with 'same' zero padding.

    Args:
        x: input of shape (batch, in_ch, H, W).
        w: kernel of shape (out_ch, in_ch, kh, kw).
        b: optional per-channel bias of shape (out_ch,).
        stride: spatial stride; output side is ceil(side / stride).
    """
    x = as_tensor(x)
    w = as_tensor(w, dtype=x.dtype)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"channel mismatch: input {x.data.shape[1]}, kernel {w.data.shape[1]}")
    bt = as_tensor(b, dtype=x.dtype) if b is not None else None
    B, C, H, W = x.data.shape
    O, _, kh, kw = w.data.shape
    ph0, ph1 = _same_pad(H, kh, stride)
    pw0, pw1 = _same_pad(W, kw, stride)
    xpad = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    Ho = -(-H // stride)
    Wo = -(-W // stride)

    # direct convolution as kh*kw shifted channel contractions (BLAS-backed)
    acc = np.zeros((B, Ho, Wo, O), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            xs = xpad[:, :, di : di + (Ho - 1) * stride + 1 : stride, dj : dj + (Wo - 1) * stride + 1 : stride]
            acc += np.tensordot(xs, w.data[:, :, di, dj], axes=([1], [1]))
    data = np.moveaxis(acc, 3, 1)
    if bt is not None:
        data = data + bt.data[None, :, None, None]

    def grad_fn(g):
        gm = np.moveaxis(g, 1, 3)
        gxpad = np.zeros((B, xpad.shape[2], xpad.shape[3], C), dtype=np.result_type(g))
        gw = np.zeros_like(w.data, dtype=np.result_type(g))
        for di in range(kh):
            for dj in range(kw):
                xs = xpad[:, :, di : di + (Ho - 1) * stride + 1 : stride, dj : dj + (Wo - 1) * stride + 1 : stride]
                gw[:, :, di, dj] = np.tensordot(gm, xs, axes=([0, 1, 2], [0, 2, 3]))
                gxpad[:, di : di + (Ho - 1) * stride + 1 : stride, dj : dj + (Wo - 1) * stride + 1 : stride, :] += np.tensordot(
                    gm, w.data[:, :, di, dj], axes=([3], [0])
                )
        gx = np.moveaxis(gxpad, 3, 1)[:, :, ph0 : ph0 + H, pw0 : pw0 + W]
        if bt is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, w) if bt is None else (x, w, bt)
    return make_node(data, parents, grad_fn)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbor spatial upsampling of a (B, C, H, W) tensor."""
    x = as_tensor(x)
    B, C, H, W = x.data.shape
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def grad_fn(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_node(data, (x,), grad_fn)
