"""Comparison quantizers for the ablations, plus a single dispatch point.

All training-time forwards here operate on the *normalized* input
``x in [0, 2^b - 1]``.  :func:`training_forward` is what the quantizer layers
call: it returns the training-time output together with its local derivative
``dy/dx``, so each variant only has to say what it does in the two passes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from daq.core import (
    CellContext,
    ContractViolation,
    QuantizerParams,
    QuantizerSpec,
    _as_float,
    _out,
    adaptive_temperature,
    cell_context,
    normalize,
    normalize_grads,
    rescale,
    rescale_slope,
    soft_assignment,
    soft_assignment_grad,
    staircase,
)

DEFAULT_STE_DASR_BETA = 4.0


class KindName(str, enum.Enum):
    DAQ = "daq"
    KERNEL = "kernel"
    PLAIN = "plain"
    SIGMOID = "sigmoid"
    STE = "ste"
    STE_DASR = "ste_dasr"
    ANNEAL = "anneal"


_HAS_BETA = {KindName.KERNEL, KindName.PLAIN, KindName.SIGMOID, KindName.STE_DASR}


@dataclass(frozen=True)
class QuantizerKind:
    """Which quantizer a layer trains with.

    Text form (used by configs and the CLI): ``daq``, ``kernel:4``,
    ``plain:10``, ``sigmoid:4``, ``ste``, ``ste_dasr:4``, ``anneal:2:48``.
    """

    name: KindName
    beta: float | None = None
    beta_start: float | None = None
    beta_end: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "name", KindName(self.name))
        if self.name in _HAS_BETA:
            if self.beta is None or not self.beta > 0:
                raise ValueError(f"{self.name.value} needs a positive beta, got {self.beta!r}")
        if self.name is KindName.ANNEAL:
            if self.beta_start is None or self.beta_end is None:
                raise ValueError("anneal needs beta_start and beta_end")
            if not 0 < self.beta_start < self.beta_end:
                raise ValueError(
                    f"anneal needs 0 < beta_start < beta_end, got {self.beta_start}, {self.beta_end}"
                )

    @classmethod
    def daq(cls):
        return cls(KindName.DAQ)

    @classmethod
    def kernel(cls, beta: float):
        return cls(KindName.KERNEL, beta=float(beta))

    @classmethod
    def plain(cls, beta: float):
        return cls(KindName.PLAIN, beta=float(beta))

    @classmethod
    def sigmoid(cls, beta: float):
        return cls(KindName.SIGMOID, beta=float(beta))

    @classmethod
    def ste(cls):
        return cls(KindName.STE)

    @classmethod
    def ste_dasr(cls, beta: float = DEFAULT_STE_DASR_BETA):
        return cls(KindName.STE_DASR, beta=float(beta))

    @classmethod
    def annealed(cls, beta_start: float = 2.0, beta_end: float = 48.0):
        return cls(KindName.ANNEAL, beta_start=float(beta_start), beta_end=float(beta_end))

    @property
    def rounds_in_training(self) -> bool:
        """True when the training-time forward is already the rounding staircase."""
        return self.name in (KindName.DAQ, KindName.STE, KindName.STE_DASR)

    def __str__(self) -> str:
        if self.name is KindName.ANNEAL:
            return f"anneal:{self.beta_start:g}:{self.beta_end:g}"
        if self.beta is not None:
            return f"{self.name.value}:{self.beta:g}"
        return self.name.value


def parse_kind(text: str) -> QuantizerKind:
    parts = text.strip().lower().split(":")
    try:
        name = KindName(parts[0])
    except ValueError:
        valid = ", ".join(k.value for k in KindName)
        raise ValueError(f"unknown quantizer {parts[0]!r}; valid names: {valid}") from None
    try:
        nums = [float(p) for p in parts[1:]]
    except ValueError:
        raise ValueError(f"bad numeric parameter in quantizer {text!r}") from None
    if name in (KindName.DAQ, KindName.STE):
        if nums:
            raise ValueError(f"{name.value} takes no parameters")
        return QuantizerKind(name)
    if name is KindName.ANNEAL:
        if len(nums) not in (0, 2):
            raise ValueError("anneal takes anneal:<beta_start>:<beta_end>")
        return QuantizerKind.annealed(*nums) if nums else QuantizerKind.annealed()
    if name is KindName.STE_DASR and not nums:
        return QuantizerKind.ste_dasr()
    if len(nums) != 1:
        raise ValueError(f"{name.value} takes exactly one beta, e.g. {name.value}:4")
    return QuantizerKind(name, beta=nums[0])


# --------------------------------------------------------------------------
# elementwise soft quantizers on the normalized input
# --------------------------------------------------------------------------


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_soft(x, beta, ctx: CellContext):
    """Shifted sigmoid between adjacent levels: ``q_f + sigmoid(beta (x - q_t))``."""
    x = _as_float(x)
    return _out(ctx.q_f + _sigmoid(beta * (x - ctx.q_t)))


def sigmoid_soft_grad(x, beta, ctx: CellContext):
    x = _as_float(x)
    s = _sigmoid(beta * (x - ctx.q_t))
    return _out(beta * s * (1.0 - s))


def plain_soft_argmax(x, beta, ctx: CellContext, spec: QuantizerSpec):
    """Soft assignment with the Gaussian kernel replaced by 1."""
    return soft_assignment(x, beta, ctx, spec, kernel=False)


def plain_soft_argmax_grad(x, beta, ctx: CellContext, spec: QuantizerSpec):
    return soft_assignment_grad(x, beta, ctx, spec, kernel=False)


def kernel_soft_fixed(x, beta, ctx: CellContext, spec: QuantizerSpec):
    return soft_assignment(x, beta, ctx, spec)


def anneal_schedule(epoch: int, total_epochs: int, kind: QuantizerKind) -> float:
    """Linear ramp from ``beta_start`` at epoch 0 to ``beta_end`` at the last epoch.

    A single-epoch run uses ``beta_end`` directly.
    """
    if kind.name is not KindName.ANNEAL:
        raise ValueError(f"anneal_schedule needs an anneal kind, got {kind}")
    if not 0 <= epoch < total_epochs:
        raise ContractViolation(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return kind.beta_end
    frac = epoch / (total_epochs - 1)
    return kind.beta_start + (kind.beta_end - kind.beta_start) * frac


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


@dataclass
class QuantizerOutput:
    """Training-time output on normalized inputs and its local derivative."""

    y: np.ndarray
    dy_dx: np.ndarray
    beta: np.ndarray | float | None
    ctx: CellContext


def resolve_beta(kind: QuantizerKind, beta: float | None = None) -> float | None:
    if kind.name is KindName.ANNEAL:
        return kind.beta_end if beta is None else beta
    return kind.beta


def training_forward(kind: QuantizerKind, x, spec: QuantizerSpec, beta: float | None = None):
    """Training-time forward of ``kind`` on normalized ``x`` and ``dy/dx``.

    ``beta`` overrides the temperature for annealed quantizers (the current
    schedule value); it is ignored by every other kind.
    """
    x = _as_float(x)
    ctx = cell_context(x, spec)
    name = kind.name
    if name is KindName.DAQ:
        b = np.asarray(adaptive_temperature(x, ctx, spec))
        y = np.asarray(staircase(x, spec))
        dy = rescale_slope(spec) * np.asarray(soft_assignment_grad(x, b, ctx, spec))
        return QuantizerOutput(y, dy, b, ctx)
    if name is KindName.STE:
        return QuantizerOutput(np.asarray(staircase(x, spec)), np.ones_like(x), None, ctx)
    if name is KindName.STE_DASR:
        y = np.asarray(staircase(x, spec))
        dy = rescale_slope(spec) * np.asarray(soft_assignment_grad(x, kind.beta, ctx, spec))
        return QuantizerOutput(y, dy, kind.beta, ctx)
    b = resolve_beta(kind, beta)
    if name in (KindName.KERNEL, KindName.ANNEAL):
        y = soft_assignment(x, b, ctx, spec)
        dy = soft_assignment_grad(x, b, ctx, spec)
    elif name is KindName.PLAIN:
        y = plain_soft_argmax(x, b, ctx, spec)
        dy = plain_soft_argmax_grad(x, b, ctx, spec)
    elif name is KindName.SIGMOID:
        y = sigmoid_soft(x, b, ctx)
        dy = sigmoid_soft_grad(x, b, ctx)
    else:  # pragma: no cover - KindName is closed
        raise ValueError(f"unhandled quantizer kind {kind}")
    return QuantizerOutput(np.asarray(y), np.asarray(dy), b, ctx)


def smooth_branch(kind: QuantizerKind, x, beta, ctx: CellContext, spec: QuantizerSpec):
    """The smooth function whose derivative the backward pass uses, with ``beta`` and ``ctx`` frozen.

    Used by gradient probes: around a reference point ``x0`` the function
    ``y0 + smooth_branch(x) - smooth_branch(x0)`` has exactly the analytic
    backward as its derivative, while agreeing with the real forward at ``x0``.
    """
    x = _as_float(x)
    name = kind.name
    if name is KindName.STE:
        return x
    if name in (KindName.DAQ, KindName.STE_DASR):
        return np.asarray(rescale(soft_assignment(x, beta, ctx, spec), ctx, spec))
    if name in (KindName.KERNEL, KindName.ANNEAL):
        return np.asarray(soft_assignment(x, beta, ctx, spec))
    if name is KindName.PLAIN:
        return np.asarray(plain_soft_argmax(x, beta, ctx, spec))
    return np.asarray(sigmoid_soft(x, beta, ctx))


# --------------------------------------------------------------------------
# full-precision-input wrappers
# --------------------------------------------------------------------------


def ste_forward_backward(xhat, params: QuantizerParams, spec: QuantizerSpec):
    """Clipped STE: staircase forward, ``d normalize`` as the backward.

    Returns ``(Q, (d/dxhat, d/dl, d/du))`` for unit upstream gradient.
    """
    x = normalize(xhat, params, spec)
    return staircase(x, spec), normalize_grads(xhat, params, spec)


def ste_combined_dasr(xhat, params: QuantizerParams, spec: QuantizerSpec, beta: float):
    """Staircase forward with the fixed-temperature DASR derivative in the backward pass."""
    x = normalize(xhat, params, spec)
    out = training_forward(QuantizerKind.ste_dasr(beta), x, spec)
    d_xhat, d_l, d_u = normalize_grads(xhat, params, spec)
    return _out(out.y), (_out(out.dy_dx * d_xhat), _out(out.dy_dx * d_l), _out(out.dy_dx * d_u))


def quantizer_gap(
    kind: QuantizerKind,
    spec: QuantizerSpec,
    n_samples: int,
    *,
    beta: float | None = None,
    seed: int = 0,
    return_max: bool = False,
):
    """Mean ``|training-time forward - rounding|`` over uniform normalized inputs.

    With ``return_max`` the largest single deviation is returned as well.
    """
    if n_samples < 1:
        raise ContractViolation(f"n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, spec.top, size=n_samples)
    dev = np.abs(training_forward(kind, x, spec, beta).y - staircase(x, spec))
    gap = float(dev.mean())
    if return_max:
        return gap, float(dev.max())
    return gap
