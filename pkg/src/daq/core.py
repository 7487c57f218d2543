"""Distance-aware soft rounding (DASR) and the adaptive temperature controller.

Everything here is elementwise: functions accept Python floats or numpy arrays
and broadcast like numpy ufuncs.  Scalars in, numpy scalars out.

The quantizer pipeline for one full-precision value ``xhat`` is::

    x    = normalize(xhat)                  # clip to [l, u], map to [0, 2^b - 1]
    ctx  = cell_context(x)                  # floor/ceil candidates, transition point
    beta = adaptive_temperature(x, ctx)     # per-input temperature
    y    = soft_assignment(x, beta, ctx)    # == closed_form_output(x, ctx)
    Q    = rescale(y, ctx)                  # == rounding, exactly

The forward pass never evaluates the softmax; it uses the closed form so that
``Q`` lands on the integer grid bit-exactly.  The backward pass differentiates
the soft assignment with ``beta`` held fixed at its per-input value.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantizationError",
    "ConfigurationError",
    "ContractViolation",
    "NonFiniteInputError",
    "Role",
    "QuantizerSpec",
    "QuantizerParams",
    "CellContext",
    "DaqSaved",
    "normalize",
    "normalize_grads",
    "cell_context",
    "staircase",
    "distance_score",
    "kernel_weight",
    "weighted_score",
    "distance_probability",
    "soft_assignment",
    "soft_assignment_grad",
    "adaptive_temperature",
    "closed_form_output",
    "rescale",
    "rescale_slope",
    "daq_forward",
    "daq_backward",
    "scale_quantized",
    "scale_slope",
]


class QuantizationError(ValueError):
    """Base class for quantizer errors."""


class ConfigurationError(QuantizationError):
    """Invalid quantizer configuration (bit-width, bounds, constants)."""


class ContractViolation(QuantizationError):
    """An argument violated a documented precondition."""


class NonFiniteInputError(QuantizationError):
    """A NaN or infinity reached the quantizer."""


class Role(enum.Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"


@dataclass(frozen=True)
class QuantizerSpec:
    """Static configuration of a single quantizer.

    ``kernel_sigma`` defaults to 1 (the weight setting); use
    :meth:`for_activations` for the activation default of 2.
    """

    bits: int
    gamma: float = 2.0
    kernel_sigma: float = 1.0
    role: Role = Role.WEIGHT
    beta_cap: float = 1e6
    denom_floor: float = 1e-12

    def __post_init__(self):
        if isinstance(self.bits, bool) or int(self.bits) != self.bits or not 1 <= self.bits <= 8:
            raise ConfigurationError(f"bits must be an integer in [1, 8], got {self.bits!r}")
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if not self.kernel_sigma > 0:
            raise ConfigurationError(f"kernel_sigma must be positive, got {self.kernel_sigma}")
        if not self.beta_cap >= self.gamma:
            raise ConfigurationError(f"beta_cap ({self.beta_cap}) must be >= gamma ({self.gamma})")
        if not self.denom_floor > 0:
            raise ConfigurationError(f"denom_floor must be positive, got {self.denom_floor}")
        if not isinstance(self.role, Role):
            object.__setattr__(self, "role", Role(self.role))

    @classmethod
    def for_weights(cls, bits: int, **kwargs) -> "QuantizerSpec":
        kwargs.setdefault("kernel_sigma", 1.0)
        return cls(bits=bits, role=Role.WEIGHT, **kwargs)

    @classmethod
    def for_activations(cls, bits: int, **kwargs) -> "QuantizerSpec":
        kwargs.setdefault("kernel_sigma", 2.0)
        return cls(bits=bits, role=Role.ACTIVATION, **kwargs)

    @property
    def top(self) -> int:
        """Largest grid value, ``2^b - 1``."""
        return (1 << self.bits) - 1

    @property
    def lam(self) -> float:
        """Offset of the closed-form output from the grid, ``1 / (e^gamma + 1)``."""
        return 1.0 / (math.exp(self.gamma) + 1.0)


@dataclass(frozen=True)
class QuantizerParams:
    """Learnable per-layer quantizer state: interval ``[lower, upper]`` and conv scale."""

    lower: float
    upper: float
    conv_scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ConfigurationError(f"non-finite quantization interval [{self.lower}, {self.upper}]")
        if not self.upper > self.lower:
            raise ConfigurationError(
                f"upper bound must exceed lower bound, got lower={self.lower}, upper={self.upper}"
            )


@dataclass(frozen=True)
class CellContext:
    """The two grid candidates bracketing a normalized input.

    ``q_c - q_f == 1`` always, ``q_t`` is their midpoint and ``q_n`` the nearer
    candidate (ties at ``q_t`` go to ``q_f``).
    """

    q_f: np.ndarray
    q_c: np.ndarray
    q_t: np.ndarray
    q_n: np.ndarray


@dataclass
class DaqSaved:
    """Per-element state captured by :func:`daq_forward` for the backward pass."""

    x: np.ndarray
    ctx: CellContext
    beta: np.ndarray
    lam: float
    dx_dxhat: np.ndarray
    dx_dl: np.ndarray
    dx_du: np.ndarray
    spec: QuantizerSpec


def _as_float(x) -> np.ndarray:
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _out(arr):
    arr = np.asarray(arr)
    return arr[()] if arr.ndim == 0 else arr


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError(f"non-finite {what} passed to quantizer")


def _check_interval(params: QuantizerParams) -> None:
    if not params.upper > params.lower:
        raise ConfigurationError(
            f"upper bound must exceed lower bound, got lower={params.lower}, upper={params.upper}"
        )


def normalize(xhat, params: QuantizerParams, spec: QuantizerSpec):
    """Clip ``xhat`` to ``[lower, upper]`` and map it linearly onto ``[0, 2^b - 1]``."""
    xhat = _as_float(xhat)
    _check_finite(xhat, "input")
    _check_interval(params)
    lo, hi = params.lower, params.upper
    clipped = np.clip(xhat, lo, hi)
    # ratio first so that clipped == hi gives exactly 1 and x never exceeds top
    ratio = (clipped - lo) / (hi - lo)
    return _out((spec.top * ratio).astype(xhat.dtype, copy=False))


def normalize_grads(xhat, params: QuantizerParams, spec: QuantizerSpec):
    """Partial derivatives of :func:`normalize` w.r.t. ``xhat``, ``lower`` and ``upper``.

    Saturated inputs get zero for all three; ``xhat == lower`` and
    ``xhat == upper`` count as interior.
    """
    xhat = _as_float(xhat)
    _check_finite(xhat, "input")
    _check_interval(params)
    lo, hi = params.lower, params.upper
    width = hi - lo
    top = spec.top
    inside = (xhat >= lo) & (xhat <= hi)
    zero = np.zeros_like(xhat)
    d_xhat = np.where(inside, top / width, zero)
    d_lower = np.where(inside, top * (xhat - hi) / width**2, zero)
    d_upper = np.where(inside, -top * (xhat - lo) / width**2, zero)
    return _out(d_xhat), _out(d_lower), _out(d_upper)


def cell_context(x, spec: QuantizerSpec) -> CellContext:
    x = _as_float(x)
    top = spec.top
    if np.any(~((x >= 0) & (x <= top))):
        raise ContractViolation(f"normalized input outside [0, {top}]")
    q_f = np.minimum(np.floor(x), top - 1)
    q_c = q_f + 1
    q_t = q_f + 0.5
    q_n = np.where(x <= q_t, q_f, q_c)
    return CellContext(_out(q_f), _out(q_c), _out(q_t), _out(q_n))


def staircase(x, spec: QuantizerSpec):
    """Round-half-down onto the grid; the reference every quantizer is compared to."""
    ctx = cell_context(x, spec)
    return _out(np.where(_as_float(x) <= ctx.q_t, ctx.q_f, ctx.q_c))


def distance_score(x, q):
    x = _as_float(x)
    return _out(np.exp(-np.abs(x - q)))


def kernel_weight(q, ctx: CellContext, spec: QuantizerSpec):
    """Unnormalized Gaussian centred on the nearest candidate: 1 there, ``exp(-1/(2 sigma^2))`` on the other."""
    q = _as_float(q)
    if not np.all((q == ctx.q_f) | (q == ctx.q_c)):
        raise ContractViolation("kernel_weight called with a non-candidate grid value")
    return _out(np.exp(-((q - ctx.q_n) ** 2) / (2.0 * spec.kernel_sigma**2)))


def weighted_score(x, q, ctx: CellContext, spec: QuantizerSpec):
    return _out(kernel_weight(q, ctx, spec) * distance_score(x, q))


def _scores(x, ctx: CellContext, spec: QuantizerSpec, kernel: bool):
    if kernel:
        return weighted_score(x, ctx.q_f, ctx, spec), weighted_score(x, ctx.q_c, ctx, spec)
    return distance_score(x, ctx.q_f), distance_score(x, ctx.q_c)


def _check_beta(beta) -> np.ndarray:
    beta = _as_float(beta)
    if np.any(~(beta > 0)):
        raise ContractViolation("temperature beta must be positive")
    return beta


def distance_probability(x, beta, ctx: CellContext, spec: QuantizerSpec, *, kernel: bool = True):
    """Two-way softmax over ``beta * score`` for the floor and ceil candidates.

    Returns ``(m_f, m_c)``.  ``kernel=False`` drops the Gaussian kernel, giving
    the plain soft argmax.
    """
    beta = _check_beta(beta)
    s_f, s_c = _scores(x, ctx, spec, kernel)
    a = beta * s_f
    c = beta * s_c
    top = np.maximum(a, c)
    e_f = np.exp(a - top)
    e_c = np.exp(c - top)
    total = e_f + e_c
    return _out(e_f / total), _out(e_c / total)


def soft_assignment(x, beta, ctx: CellContext, spec: QuantizerSpec, *, kernel: bool = True):
    _, m_c = distance_probability(x, beta, ctx, spec, kernel=kernel)
    return _out(ctx.q_f + m_c)


def soft_assignment_grad(x, beta, ctx: CellContext, spec: QuantizerSpec, *, kernel: bool = True):
    """d(soft_assignment)/dx with ``beta`` and the context held fixed.

    ``sign(0) = 0`` at the integer kinks of the distance score.
    """
    x = _as_float(x)
    beta = _check_beta(beta)
    m_f, m_c = distance_probability(x, beta, ctx, spec, kernel=kernel)
    s_f, s_c = _scores(x, ctx, spec, kernel)
    ds_f = s_f * np.sign(ctx.q_f - x)
    ds_c = s_c * np.sign(ctx.q_c - x)
    return _out(beta * m_f * m_c * (ds_c - ds_f))


def adaptive_temperature(x, ctx: CellContext, spec: QuantizerSpec):
    """Per-input temperature ``gamma / |s_f - s_c|``, floored and capped."""
    s_f, s_c = _scores(x, ctx, spec, kernel=True)
    denom = np.maximum(np.abs(s_f - s_c), spec.denom_floor)
    return _out(np.minimum(spec.gamma / denom, spec.beta_cap))


def closed_form_output(x, ctx: CellContext, spec: QuantizerSpec):
    """Soft assignment evaluated at the adaptive temperature, without the softmax."""
    x = _as_float(x)
    lam = spec.lam
    return _out(np.where(x <= ctx.q_t, ctx.q_f + lam, ctx.q_c - lam))


def rescale(y, ctx: CellContext, spec: QuantizerSpec):
    return _out((_as_float(y) - ctx.q_t) / (1.0 - 2.0 * spec.lam) + ctx.q_t)


def rescale_slope(spec: QuantizerSpec) -> float:
    return 1.0 / (1.0 - 2.0 * spec.lam)


def daq_forward(xhat, params: QuantizerParams, spec: QuantizerSpec):
    """Quantize ``xhat`` to the integer grid; returns ``(Q, saved)``.

    ``Q`` is ``rescale(closed_form_output(x))`` with the offset folded first:
    ``(lam - 1/2) / (1 - 2 lam)`` is exactly ``-1/2`` in binary floating point,
    so ``Q`` is an exact integer in any float precision.
    """
    xhat = _as_float(xhat)
    x = np.asarray(normalize(xhat, params, spec))
    ctx = cell_context(x, spec)
    beta = np.asarray(adaptive_temperature(x, ctx, spec))
    lam = spec.lam
    offset = np.where(x <= ctx.q_t, lam - 0.5, 0.5 - lam) / (1.0 - 2.0 * lam)
    q = (ctx.q_t + offset).astype(x.dtype, copy=False)
    d_xhat, d_l, d_u = normalize_grads(xhat, params, spec)
    saved = DaqSaved(
        x=x,
        ctx=ctx,
        beta=beta,
        lam=lam,
        dx_dxhat=np.asarray(d_xhat),
        dx_dl=np.asarray(d_l),
        dx_du=np.asarray(d_u),
        spec=spec,
    )
    return _out(q), saved


def daq_backward(saved: DaqSaved, upstream=1.0):
    """Gradients w.r.t. ``(xhat, lower, upper)``, elementwise (not reduced)."""
    local = rescale_slope(saved.spec) * np.asarray(
        soft_assignment_grad(saved.x, saved.beta, saved.ctx, saved.spec)
    )
    g = np.asarray(upstream) * local
    return _out(g * saved.dx_dxhat), _out(g * saved.dx_dl), _out(g * saved.dx_du)


def scale_quantized(q, spec: QuantizerSpec):
    """Map grid values to ``[-1, 1]`` (weights) or ``[0, 1]`` (activations)."""
    q = _as_float(q)
    if spec.role is Role.WEIGHT:
        return _out(2.0 * q / spec.top - 1.0)
    return _out(q / spec.top)


def scale_slope(spec: QuantizerSpec) -> float:
    return (2.0 if spec.role is Role.WEIGHT else 1.0) / spec.top
