"""Differentiable operations.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` where the input
does not need one).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    a = as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = as_tensor(b, a.dtype)
    return a, b


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._node(out.astype(a.dtype, copy=False), (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    """Square root whose gradient is defined as 0 where the input is exactly 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(a.dtype, copy=False),)

    return Tensor._node(out, (a,), backward, "sqrt")


# -- activations ---------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return Tensor._node(out, (a,), lambda g: (g * (out > 0),), "relu")


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


# -- reductions and shape ops ------------------------------------------------------


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return Tensor._node(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._node(a.data[idx], (a,), backward, "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as ``(out, in)``."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# -- convolution and pooling ------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns laid out (kh, kw, C, N, Ho, Wo) so every offset is a block copy."""
    n, c = x.shape[:2]
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(kh * kw * c, n * ho * wo)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (N, C, H, W); ``weight``: (F, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(f, -1)  # (F, kh*kw*C)
    out = wmat @ cols
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = None
        if weight.requires_grad:
            gw = (gf @ cols.T).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gf).reshape(kh, kw, c, n, ho, wo)
            dxp = np.zeros((c, n) + xp.shape[2:], dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = (gx, gw)
        if bias is not None:
            grads += (gf.sum(axis=1),)
        return grads

    return Tensor._node(out, parents, backward, "conv2d")


def maxpool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    if stride != kernel:
        raise ValueError("only non-overlapping pooling (stride == kernel) is supported")
    n, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho == 0 or wo == 0:
        raise ValueError(f"maxpool2d window {kernel} larger than input {h}x{w}")
    crop = x.data[:, :, : ho * kernel, : wo * kernel].reshape(n, c, ho, kernel, wo, kernel)
    out = crop[:, :, :, 0, :, 0].copy()
    for i in range(kernel):
        for j in range(kernel):
            if i or j:
                np.maximum(out, crop[:, :, :, i, :, j], out=out)

    def backward(g):
        win = crop.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)
        arg = win.argmax(axis=-1)[..., None]
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kernel, wo * kernel)
        gx = np.zeros_like(x.data)
        gx[:, :, : ho * kernel, : wo * kernel] = gw
        return (gx,)

    return Tensor._node(out, (x,), backward, "maxpool2d")


# -- normalization and regularization ------------------------------------------------


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over all axes except 1 (channels).

    In training mode the running buffers are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    if training:
        count = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.data.size // x.shape[1]
            gx = (inv.reshape(bshape) / m) * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    d = x.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        gx = (inv / d) * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return Tensor._node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- losses ---------------------------------------------------------------------------


def mse_loss(pred, target) -> Tensor:
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise ValueError(f"loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return mean(diff * diff)


def rmse_loss(pred, target) -> Tensor:
    return sqrt(mse_loss(pred, target))


def masked_frame_mse(frames, target, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-clip mean squared error over valid frames.

    ``frames``: (B, T) estimates, ``target``: (B,), ``mask``: (B, T) of 0/1.
    Returns ``(batch_loss, per_clip_loss)``; the batch loss is the mean of the
    per-clip losses so padding never changes a clip's contribution.
    """
    frames = as_tensor(frames)
    target = as_tensor(target, frames.dtype)
    mask = np.asarray(mask, dtype=frames.dtype)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every clip needs at least one valid frame")
    diff = frames - reshape(target, (-1, 1))
    per_clip = sum(diff * diff * mask, axis=1) / counts
    return mean(per_clip), per_clip


# -- recurrent kernels ------------------------------------------------------------------


def gru_layer(x, w_ih, w_hh, b_ih, b_hh, mask: np.ndarray | None = None,
              reverse: bool = False, h0: np.ndarray | None = None) -> Tensor:
    """One direction of a GRU layer over a padded batch.

    ``x``: (B, T, D); weights in (3H, in) layout with gate order
    reset/update/candidate. Frames where ``mask`` is 0 leave the state
    unchanged, so a reverse pass starts at each sequence's last valid frame.
    Returns (B, T, H).
    """
    x, w_ih, w_hh, b_ih, b_hh = (as_tensor(t) for t in (x, w_ih, w_hh, b_ih, b_hh))
    dtype = w_hh.dtype
    b, t_len, d = x.shape
    h = w_hh.shape[1]
    xs = np.ascontiguousarray(x.data.transpose(1, 0, 2), dtype=dtype)  # (T, B, D)
    gx = np.ascontiguousarray((xs.reshape(-1, d) @ w_ih.data.T + b_ih.data).reshape(t_len, b, 3 * h), dtype=dtype)
    m = np.ones((t_len, b), dtype=dtype) if mask is None else np.ascontiguousarray(np.asarray(mask, dtype=dtype).T)
    h_init = np.zeros((b, h), dtype=dtype) if h0 is None else np.ascontiguousarray(h0, dtype=dtype)
    w = np.ascontiguousarray(w_hh.data)
    bh = np.ascontiguousarray(b_hh.data)
    hs, r, z, n, ghn = kernels.gru_forward(gx, w, bh, m, h_init, reverse)

    def backward(g):
        dhs = np.ascontiguousarray(g.transpose(1, 0, 2), dtype=dtype)
        dgx, dgh, _ = kernels.gru_backward(dhs, w, m, h_init, hs, r, z, n, ghn, reverse)
        if reverse:
            hprev = np.concatenate([hs[1:], h_init[None]], axis=0)
        else:
            hprev = np.concatenate([h_init[None], hs[:-1]], axis=0)
        dgx2 = dgx.reshape(-1, 3 * h)
        dgh2 = dgh.reshape(-1, 3 * h)
        gx_in = (dgx2 @ w_ih.data).reshape(t_len, b, d).transpose(1, 0, 2) if x.requires_grad else None
        return (
            gx_in,
            dgx2.T @ xs.reshape(-1, d),
            dgh2.T @ hprev.reshape(-1, h),
            dgx2.sum(axis=0),
            dgh2.sum(axis=0),
        )

    out = np.ascontiguousarray(hs.transpose(1, 0, 2))
    return Tensor._node(out, (x, w_ih, w_hh, b_ih, b_hh), backward, "gru_layer")
