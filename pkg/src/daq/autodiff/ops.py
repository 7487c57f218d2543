"""Differentiable ops over :class:`~daq.autodiff.tensor.Tensor`."""

from __future__ import annotations

import numpy as np

from daq.autodiff.tensor import ShapeError, TapeNode, Tensor, as_tensor

STANDARDIZE_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, TapeNode("add", (a, b), back))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, TapeNode("sub", (a, b), back))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, TapeNode("mul", (a, b), back))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def back(g):
        return (np.broadcast_to(g.reshape(()), x.shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum()), TapeNode("sum", (x,), back))


def mean(x: Tensor) -> Tensor:
    n = x.size

    def back(g):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)

    return Tensor._from_op(np.asarray(x.data.mean()), TapeNode("mean", (x,), back))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), TapeNode("relu", (x,), back))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def back(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(data, TapeNode("reshape", (x,), back))


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the batch axis."""
    return reshape(x, (x.shape[0], -1))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``x: [N, in]``, ``w: [out, in]``, ``b: [out]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("dense", x.shape, w.shape, detail="expected x [N, in] and W [out, in]")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("dense", w.shape, b.shape, detail="bias must be [out]")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._from_op(out, TapeNode("dense", inputs, back))


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, channels-first, zero padding.

    ``x: [N, C, H, W]``, ``w: [O, C, kh, kw]``.  The loop runs over kernel
    offsets in row-major order, so the reduction order is fixed.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="expected x [N, C, H, W] and W [O, C, kh, kw]")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, detail="bias must be [O]")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} or padding {padding}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x.data, w.data))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + span_h : stride, j : j + span_w : stride]
            out += np.einsum("nchw,oc->nohw", patch, w.data[:, :, i, j])
    if b is not None:
        out += b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + span_h : stride, j : j + span_w : stride]
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch)
                gx[:, :, i : i + span_h : stride, j : j + span_w : stride] += np.einsum(
                    "nohw,oc->nchw", g, w.data[:, :, i, j]
                )
        gx = gx[:, :, padding : padding + h, padding : padding + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out, TapeNode("conv2d", inputs, back, {"stride": stride, "padding": padding}))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()

    def back(g):
        p = np.exp(log_p)
        p[rows, labels] -= 1.0
        return (p * (g.reshape(()) / n),)

    return Tensor._from_op(np.asarray(loss), TapeNode("softmax_cross_entropy", (logits,), back))


def weight_standardize(w: Tensor, eps: float = STANDARDIZE_EPS) -> Tensor:
    """``(w - mean) / (std + eps)`` over all elements (population std)."""
    if w.size == 0:
        raise ShapeError("weight_standardize", w.shape, detail="empty weight tensor")
    centered = w.data - w.data.mean()
    std = np.sqrt((centered**2).mean())
    denom = std + eps
    out = centered / denom
    n = w.size

    def back(g):
        gc = g - g.mean()
        if std == 0:
            return (gc / denom,)
        proj = (g * centered).sum()
        return (gc / denom - centered * proj / (denom**2 * std * n),)

    return Tensor._from_op(out, TapeNode("weight_standardize", (w,), back))
