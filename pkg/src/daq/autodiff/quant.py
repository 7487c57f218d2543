"""Quantizer nodes for the tape.

A :class:`FakeQuantizer` owns the learnable interval ``(lower, upper)`` of one
weight or activation quantizer and records a custom-gradient node each call.
Outputs are already scaled to ``[-1, 1]`` (weights) or ``[0, 1]``
(activations).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from daq.autodiff.tensor import TapeNode, Tensor
from daq.baselines import KindName, QuantizerKind, smooth_branch, training_forward
from daq.core import (
    CellContext,
    QuantizerParams,
    QuantizerSpec,
    Role,
    daq_backward,
    daq_forward,
    normalize,
    normalize_grads,
    scale_quantized,
    scale_slope,
    staircase,
)

FULL_PRECISION = 32
MODES = ("train", "round")


@dataclass
class _Frozen:
    """Reference point for gradient probes (see :meth:`FakeQuantizer.capture`)."""

    x: np.ndarray
    ctx: CellContext
    beta: np.ndarray | float | None
    y0: np.ndarray
    branch0: np.ndarray


class FakeQuantizer:
    def __init__(
        self,
        bits: int,
        kind: QuantizerKind | None,
        role: Role,
        *,
        gamma: float = 2.0,
        kernel_sigma: float | None = None,
        lower: float = -3.0,
        upper: float = 3.0,
        lower_trainable: bool = True,
        name: str = "",
    ):
        self.bits = bits
        self.role = role
        self.kind = kind if kind is not None else QuantizerKind.daq()
        self.name = name
        if bits == FULL_PRECISION:
            self.spec = None
        else:
            if kernel_sigma is None:
                kernel_sigma = 1.0 if role is Role.WEIGHT else 2.0
            self.spec = QuantizerSpec(bits=bits, gamma=gamma, kernel_sigma=kernel_sigma, role=role)
        self.lower = Tensor([lower], requires_grad=lower_trainable, name=f"{name}.lower")
        self.upper = Tensor([upper], requires_grad=True, name=f"{name}.upper")
        self.beta: float | None = None  # current annealing temperature
        self._capture = False
        self._frozen: _Frozen | None = None
        self.reset_stats()

    @property
    def enabled(self) -> bool:
        return self.spec is not None

    @property
    def lower_trainable(self) -> bool:
        return self.lower.requires_grad

    def params(self) -> QuantizerParams:
        return QuantizerParams(float(self.lower.data[0]), float(self.upper.data[0]))

    def set_bounds(self, lower: float, upper: float, *, lower_trainable: bool | None = None) -> None:
        self.lower.data[...] = lower
        self.upper.data[...] = upper
        if lower_trainable is not None:
            self.lower.requires_grad = lower_trainable

    def parameters(self) -> list[Tensor]:
        if not self.enabled:
            return []
        return [t for t in (self.lower, self.upper) if t.requires_grad]

    # -- statistics ---------------------------------------------------------

    def reset_stats(self) -> None:
        self._gap_sum = 0.0
        self._beta_sum = 0.0
        self._count = 0

    @property
    def mean_gap(self) -> float:
        return self._gap_sum / self._count if self._count else 0.0

    @property
    def mean_beta(self) -> float:
        return self._beta_sum / self._count if self._count else float("nan")

    def _record(self, y: np.ndarray, x: np.ndarray, beta) -> None:
        ref = staircase(x, self.spec)
        self._gap_sum += float(np.abs(y - ref).sum())
        if beta is None:
            self._beta_sum = float("nan")
        else:
            self._beta_sum += float(np.broadcast_to(beta, y.shape).sum())
        self._count += y.size

    # -- gradient probes ----------------------------------------------------

    def capture(self) -> None:
        """Remember the next forward's contexts; later forwards evaluate a smooth surrogate.

        The surrogate equals the real forward at the captured point and has
        the analytic backward as its derivative, which is what finite
        differences can check.  Call :meth:`release` to return to normal.
        """
        self._capture = True
        self._frozen = None

    def release(self) -> None:
        self._capture = False
        self._frozen = None

    # -- forward ------------------------------------------------------------

    def __call__(self, xhat: Tensor, mode: str = "train") -> Tensor:
        if mode not in MODES:
            raise ValueError(f"unknown quantizer mode {mode!r}; expected one of {MODES}")
        if not self.enabled:
            return xhat
        spec = self.spec
        params = self.params()
        data = xhat.data
        slope = scale_slope(spec)
        dtype = data.dtype

        if self.kind.name is KindName.DAQ and mode == "train" and self._frozen is None:
            q, saved = daq_forward(data, params, spec)
            q = np.asarray(q)
            self._record(q, saved.x, saved.beta)
            if self._capture:
                self._frozen = _Frozen(saved.x, saved.ctx, saved.beta, q, smooth_branch(self.kind, saved.x, saved.beta, saved.ctx, spec))

            def back(g):
                gx, gl, gu = daq_backward(saved, g * slope)
                return self._reduce(gx, gl, gu)

            out = np.asarray(scale_quantized(q, spec)).astype(dtype, copy=False)
            node = TapeNode("fake_quantize", (xhat, self.lower, self.upper), back, {"daq": saved})
            return Tensor._from_op(out, node)

        x = np.asarray(normalize(data, params, spec))
        d_xhat, d_l, d_u = (np.asarray(d) for d in normalize_grads(data, params, spec))
        res = training_forward(self.kind, x, spec, self.beta)
        y = res.y
        if mode == "round":
            y = np.asarray(staircase(x, spec))
        elif self._frozen is not None:
            fz = self._frozen
            y = fz.y0 + smooth_branch(self.kind, x, fz.beta, fz.ctx, spec) - fz.branch0
        else:
            self._record(y, x, res.beta)
            if self._capture:
                self._frozen = _Frozen(x, res.ctx, res.beta, y, smooth_branch(self.kind, x, res.beta, res.ctx, spec))
        dy = res.dy_dx

        def back(g):
            local = g * slope * dy
            return self._reduce(local * d_xhat, local * d_l, local * d_u)

        out = np.asarray(scale_quantized(y, spec)).astype(dtype, copy=False)
        node = TapeNode(
            "fake_quantize",
            (xhat, self.lower, self.upper),
            back,
            {"x": x, "ctx": res.ctx, "beta": res.beta, "dy_dx": dy},
        )
        return Tensor._from_op(out, node)

    def _reduce(self, gx, gl, gu):
        gl_total = np.asarray([np.sum(gl)]) if self.lower.requires_grad else None
        return gx, gl_total, np.asarray([np.sum(gu)])
