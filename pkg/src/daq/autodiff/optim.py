"""SGD with momentum, Adam, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from daq.autodiff.tensor import ShapeError, Tensor


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """``lr0 * (1 + cos(pi * step / total)) / 2``; ``lr0`` at 0 and 0 at ``total``."""
    if total <= 0:
        raise ValueError(f"total must be positive, got {total}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _grads_for(params: Sequence[Tensor], grads) -> list[np.ndarray]:
    if grads is None:
        grads = [p.grad for p in params]
    out = []
    for p, g in zip(params, grads, strict=True):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError("optimizer step", p.shape, g.shape)
        out.append(g)
    return out


def sgd_step(params, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, state: dict | None = None) -> None:
    """In-place SGD update; ``state`` holds momentum buffers keyed by tensor."""
    state = {} if state is None else state
    for p, g in zip(params, _grads_for(params, grads)):
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            buf = state.get(p)
            buf = g.copy() if buf is None else momentum * buf + g
            state[p] = buf
            g = buf
        p.data -= (lr * g).astype(p.dtype, copy=False)


def adam_step(
    params,
    grads,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    state: dict | None = None,
) -> None:
    """In-place Adam update with bias correction.  Never applies weight decay."""
    state = {} if state is None else state
    t = state.get("t", 0) + 1
    state["t"] = t
    for p, g in zip(params, _grads_for(params, grads)):
        m, v = state.get(p, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state[p] = (m, v)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self, lr: float | None = None) -> None:
        sgd_step(self.params, None, self.lr if lr is None else lr, self.momentum, self.weight_decay, self.state)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = (beta1, beta2)
        self.eps = eps
        self.state: dict = {}

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, None, self.lr if lr is None else lr, *self.betas, self.eps, self.state)
