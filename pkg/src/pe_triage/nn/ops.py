"""Differentiable layer primitives over N×C×H×W tensors.

Convolution is cross-correlation (no kernel flip). Reductions accumulate in
float64 and cast back to the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatch, Tensor


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    extent = kernel + (kernel - 1) * (dilation - 1)
    return (size + 2 * padding - extent) // stride + 1


def _tap(xp: np.ndarray, i: int, j: int, stride: int, dilation: int, ho: int, wo: int) -> tuple[slice, slice]:
    hs, ws = i * dilation, j * dilation
    return (
        slice(hs, hs + stride * (ho - 1) + 1, stride),
        slice(ws, ws + stride * (wo - 1) + 1, stride),
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeMismatch(f"input has {c} channels, weight expects {ci}")
    if dilation < 1 or stride < 1:
        raise ValueError("stride and dilation must be >= 1")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel extent exceeds padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            si, sj = _tap(xp, i, j, stride, dilation, ho, wo)
            cols[:, i, j] = xp[:, :, si, sj].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    si, sj = _tap(xp, i, j, stride, dilation, ho, wo)
                    gxp[:, :, si, sj] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.dtype)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, padding, 1)
    wo = conv_output_size(w, kernel, stride, padding, 1)
    xp = np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf
    )
    taps = np.empty((kernel * kernel, n, c, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            si, sj = _tap(xp, i, j, stride, 1, ho, wo)
            taps[i * kernel + j] = xp[:, :, si, sj]
    arg = taps.argmax(axis=0)
    out = np.take_along_axis(taps, arg[None], axis=0)[0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                si, sj = _tap(xp, i, j, stride, 1, ho, wo)
                gxp[:, :, si, sj] += np.where(arg == i * kernel + j, g, 0)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return Tensor.from_op(out, (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (updated in place).

    With a ``num_batches`` counter the first updates use a cumulative
    average, so the initial unit variance does not linger in the estimate.
    """

    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches: Tensor | None = None


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise ShapeMismatch(f"batch_norm parameters do not match {c} channels")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, c, 1, 1) if x.ndim == 4 else (1, c)
    m = x.data.size // c
    if training:
        x64 = x.data.astype(np.float64)
        mean = x64.mean(axis=axes)
        var = ((x64 - mean.reshape(bshape)) ** 2).mean(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        mom = state.momentum
        if state.num_batches is not None:
            seen = float(state.num_batches.data[0])
            mom = max(mom, 1.0 / (seen + 1.0))
            state.num_batches.data[0] = seen + 1
        state.running_mean.data[...] = (1 - mom) * state.running_mean.data + mom * mean
        state.running_var.data[...] = (1 - mom) * state.running_var.data + mom * unbiased
        mean = mean.astype(x.dtype)
        var = var.astype(x.dtype)
    else:
        mean = state.running_mean.data.astype(x.dtype)
        var = state.running_var.data.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes, dtype=np.float64).astype(gamma.dtype)
        gb = g.sum(axis=axes, dtype=np.float64).astype(beta.dtype)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes, dtype=np.float64).reshape(bshape) / m
            s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64).reshape(bshape) / m
            gx = (inv_std.reshape(bshape) * (dxhat - s1 - xhat * s2)).astype(x.dtype)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return Tensor.from_op(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * out * (1 - out),)

    return Tensor.from_op(out, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def _max_mask(data: np.ndarray, axis: int) -> np.ndarray:
    """One-hot mask of the first maximum along ``axis``."""
    arg = data.argmax(axis=axis)
    mask = np.zeros(data.shape, dtype=bool)
    np.put_along_axis(mask, np.expand_dims(arg, axis), True, axis=axis)
    return mask


def global_pool(x: Tensor, kind: str) -> Tensor:
    """N×C×H×W -> N×C by spatial average or max."""
    if x.ndim != 4:
        raise ShapeMismatch(f"global_pool expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if kind == "avg":
        out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

        def backward(g):
            return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    elif kind == "max":
        flat = x.data.reshape(n, c, h * w)
        mask = _max_mask(flat, 2)
        out = flat.max(axis=2)

        def backward(g):
            return ((mask * g[:, :, None]).reshape(x.shape).astype(x.dtype),)

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return Tensor.from_op(out, (x,), backward)


def channel_reduce(x: Tensor, kind: str) -> Tensor:
    """N×C×H×W -> N×1×H×W by mean or max over channels."""
    if x.ndim != 4:
        raise ShapeMismatch(f"channel_reduce expects N×C×H×W, got {x.shape}")
    c = x.shape[1]
    if kind == "mean":
        out = x.data.mean(axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)

        def backward(g):
            return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)

    elif kind == "max":
        mask = _max_mask(x.data, 1)
        out = x.data.max(axis=1, keepdims=True)

        def backward(g):
            return ((mask * g).astype(x.dtype),)

    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return Tensor.from_op(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x: N×D, weight: D×K, bias: K."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: cannot multiply {x.shape} by {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatch(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T
        gw = x.data.T @ g
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(bias.dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets, class_weights=None) -> Tensor:
    """Mean cross-entropy over the batch; optional per-class weights.

    With class weights the mean is normalized by the summed sample weights.
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be N×K, got {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeMismatch(f"expected {n} targets, got shape {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise ValueError("target index out of range")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), targets]
    if class_weights is None:
        sw = np.ones(n)
    else:
        sw = np.asarray(class_weights, dtype=np.float64)[targets]
    denom = sw.sum()
    loss = np.asarray(max((sw * nll).sum() / denom, 0.0), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), targets] -= 1.0
        return ((p * (sw / denom)[:, None] * float(g)).astype(logits.dtype),)

    return Tensor.from_op(loss, (logits,), backward)

