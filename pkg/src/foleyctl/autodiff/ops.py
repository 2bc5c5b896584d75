"""Neural-net primitives on top of the core tensor ops.

Convolutions use an im2col layout so the heavy lifting is a single GEMM;
their backward passes scatter with strided slice adds rather than ufunc.at.
All ops preserve the input dtype and work on batched inputs: convolutions
take (batch, channels, time), attention takes (..., tokens, dim).
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, _node, as_tensor, matmul, softmax


def _conv_out_len(t: int, k: int, stride: int, pad: int) -> int:
    out = (t + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv window (k={k}, stride={stride}, pad={pad}) larger than input", (t,)
        )
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, t_out: int) -> np.ndarray:
    """(B, C, Tp) -> (B, T_out, C*K) patch matrix."""
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, :, idx]  # (B, C, T_out, K)
    b, c = xp.shape[0], xp.shape[1]
    return cols.transpose(0, 2, 1, 3).reshape(b, t_out, c * k)


def _col_scatter(shape, cols: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter (B, T_out, C*K) back into (B, C, T)."""
    b, c, t = shape
    t_out = cols.shape[1]
    cols = cols.reshape(b, t_out, c, k).transpose(0, 2, 1, 3)  # (B, C, T_out, K)
    xp = np.zeros((b, c, t + 2 * pad), dtype=cols.dtype)
    for kk in range(k):
        xp[:, :, kk : kk + stride * t_out : stride] += cols[:, :, :, kk]
    return xp[:, :, pad : pad + t] if pad else xp


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0):
    """1-D convolution. x: (B, C_in, T), w: (C_out, C_in, K), b: (C_out,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError("conv1d expects (B,C,T) input and (O,C,K) weight", x.shape, w.shape)
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d channel mismatch", x.shape, w.shape)
    bsz, c_in, t = x.shape
    c_out, _, k = w.shape
    t_out = _conv_out_len(t, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    patches = _im2col(xp, k, stride, t_out)  # (B, T_out, C*K)
    wm = w.data.reshape(c_out, c_in * k)
    y = (patches @ wm.T).transpose(0, 2, 1)  # (B, C_out, T_out)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[:, None]
        parents.append(b)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1))  # (B, T_out, C_out)
        if w.requires_grad:
            gw = gt.reshape(-1, c_out).T @ patches.reshape(-1, c_in * k)
            w._accumulate_owned(gw.reshape(c_out, c_in, k))
        if b is not None and b.requires_grad:
            b._accumulate_owned(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = gt @ wm  # (B, T_out, C*K)
            x._accumulate_owned(_col_scatter(x.shape, gcols, k, stride, padding))

    return _node(y, parents, backward)


def conv_transpose1d(x, w, b=None, stride: int = 1, padding: int = 0):
    """Transposed 1-D convolution (adjoint of conv1d w.r.t. its input).

    x: (B, C_in, T), w: (C_in, C_out, K); output length (T-1)*stride + K - 2*padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError("conv_transpose1d expects (B,C,T) and (C,O,K)", x.shape, w.shape)
    if x.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose1d channel mismatch", x.shape, w.shape)
    bsz, c_in, t = x.shape
    _, c_out, k = w.shape
    t_out = (t - 1) * stride + k - 2 * padding
    if t_out < 1:
        raise ShapeError("conv_transpose1d output would be empty", x.shape)
    wm = w.data.reshape(c_in, c_out * k)
    contrib = (x.data.transpose(0, 2, 1) @ wm).reshape(bsz, t, c_out, k)
    full = np.zeros((bsz, c_out, (t - 1) * stride + k), dtype=x.data.dtype)
    ct = contrib.transpose(0, 2, 1, 3)  # (B, C_out, T, K)
    for kk in range(k):
        full[:, :, kk : kk + stride * t : stride] += ct[:, :, :, kk]
    y = full[:, :, padding : padding + t_out]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[:, None]
        parents.append(b)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding))) if padding else g
        idx = np.arange(t)[:, None] * stride + np.arange(k)[None, :]
        gcols = gp[:, :, idx]  # (B, C_out, T, K)
        if x.requires_grad:
            flat = gcols.transpose(0, 2, 1, 3).reshape(bsz, t, c_out * k)
            x._accumulate_owned(np.ascontiguousarray((flat @ wm.T).transpose(0, 2, 1)))
        if w.requires_grad:
            gw = np.einsum("bct,botk->cok", x.data, gcols)
            w._accumulate_owned(gw)
        if b is not None and b.requires_grad:
            b._accumulate_owned(g.sum(axis=(0, 2)))

    return _node(y, parents, backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis, then apply a learned affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        if beta.requires_grad:
            beta._accumulate_owned(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gamma.requires_grad:
            gamma._accumulate_owned((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            gx -= m1
            gx -= xhat * m2
            gx *= inv
            x._accumulate_owned(gx)

    return _node(y, (x, gamma, beta), backward)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Channel-wise batch normalization for (B, C, T) activations.

    In training mode the batch statistics normalize and the running buffers
    are updated in place; in eval mode the running buffers normalize.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise ShapeError("batch_norm expects (B, C, T)", x.shape)
    if training:
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        n = x.shape[0] * x.shape[2]
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None]) * inv[:, None]
    y = xhat * gamma.data[:, None] + beta.data[:, None]

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2)))
        if x.requires_grad:
            gxh = g * gamma.data[:, None]
            if training:
                n = x.shape[0] * x.shape[2]
                s1 = gxh.sum(axis=(0, 2))[:, None]
                s2 = (gxh * xhat).sum(axis=(0, 2))[:, None]
                x.accumulate_grad(inv[:, None] * (gxh - s1 / n - xhat * s2 / n))
            else:
                x.accumulate_grad(gxh * inv[:, None])

    return _node(y, (x, gamma, beta), backward)


def embedding(table, indices):
    """Row lookup: table (V, D), integer indices of any shape -> (..., D)."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        table.accumulate_grad(full)

    return _node(out, (table,), backward)


def _linear_weights(t_in: int, size: int, dtype):
    """Source indices and blend weights for endpoint-aligned interpolation."""
    if t_in == 1 or size == 1:
        pos = np.zeros(size)
    else:
        pos = np.arange(size) * ((t_in - 1) / (size - 1))
    i0 = np.minimum(pos.astype(np.int64), max(t_in - 2, 0))
    frac = (pos - i0).astype(dtype)
    i1 = np.minimum(i0 + 1, t_in - 1)
    return i0, i1, frac


def upsample_linear(x, size: int):
    """Resize the last axis of (B, C, T) by endpoint-aligned linear interpolation."""
    x = as_tensor(x)
    t_in = x.shape[-1]
    i0, i1, frac = _linear_weights(t_in, size, x.dtype)
    y = x.data[..., i0] * (1.0 - frac) + x.data[..., i1] * frac

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (Ellipsis, i0), g * (1.0 - frac))
        np.add.at(full, (Ellipsis, i1), g * frac)
        x.accumulate_grad(full)

    return _node(y, (x,), backward)


def upsample_nearest(x, size: int):
    """Resize the last axis of (B, C, T) by nearest-neighbor lookup."""
    x = as_tensor(x)
    t_in = x.shape[-1]
    idx = np.minimum((np.arange(size) * t_in) // size, t_in - 1)
    y = x.data[..., idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (Ellipsis, idx), g)
        x.accumulate_grad(full)

    return _node(y, (x,), backward)


def dropout(x, p: float, rng: np.random.Generator, training: bool = True):
    """Inverted dropout; identity when not training or p == 0."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    y = x.data * keep

    def backward(g):
        x.accumulate_grad(g * keep)

    return _node(y, (x,), backward)


def scaled_dot_product_attention(q, k, v):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    q: (..., T, d), k/v: (..., S, d); leading axes broadcast.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention query/key dims differ", q.shape, k.shape)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention key/value lengths differ", k.shape, v.shape)
    scale = 1.0 / np.sqrt(q.shape[-1])
    # scale q, not the score matrix: q is T×d, scores are T×S with S >> d here
    scores = matmul(q * scale, k.transpose(*_swap_last(k.ndim)))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target."""
    target = as_tensor(target)
    diff = pred - target
    return (diff * diff).mean()


def cross_entropy_from_logits(logits: Tensor, target_probs) -> Tensor:
    """Mean over frames of -sum(target * log_softmax(logits))."""
    from .tensor import log_softmax, sum_

    target = as_tensor(target_probs)
    per_frame = sum_(log_softmax(logits, axis=-1) * target, axis=-1)
    return -per_frame.mean()
