"""Finite-difference audit of the quantizer backward pass.

Two suites:

* fixed temperature: for each ``beta`` the backward local of
  ``rescale(soft_assignment(x; beta))`` against central differences;
* full chain: ``daq_forward``/``daq_backward`` at the adaptive temperature,
  differentiated w.r.t. ``xhat``, ``lower`` and ``upper``.

Central differences are taken on the distance probability of the candidate
that is *not* nearest (``m_c`` or ``-m_f``).  That differs from the soft
assignment by a constant inside a cell, but stays small near grid points, so
the difference quotient keeps full relative precision even where the
gradient vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from daq.core import (
    CellContext,
    DaqSaved,
    QuantizerParams,
    QuantizerSpec,
    cell_context,
    daq_backward,
    daq_forward,
    distance_probability,
    normalize,
    rescale_slope,
)

KINK_MARGIN = 0.05
THRESHOLD = 1e-5


@dataclass
class AuditLine:
    label: str
    worst: float
    checked: int
    excluded: int

    def passed(self, threshold: float = THRESHOLD) -> bool:
        return self.worst <= threshold


@dataclass
class AuditReport:
    lines: list[AuditLine] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max((line.worst for line in self.lines), default=0.0)

    def passed(self, threshold: float = THRESHOLD) -> bool:
        return all(line.passed(threshold) for line in self.lines)


def _rel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    return np.abs(a - b) / scale


def kink_distance(x: np.ndarray) -> np.ndarray:
    """Distance to the nearest integer or half-integer (grid points and transition points)."""
    return np.abs(x * 2 - np.round(x * 2)) / 2


def _sample_clear(rng, n: int, low: float, high: float, to_x, margin: float):
    kept, excluded = [], 0
    while sum(len(k) for k in kept) < n:
        cand = rng.uniform(low, high, size=n)
        x = to_x(cand)
        ok = kink_distance(x) >= margin
        excluded += int((~ok).sum())
        kept.append(cand[ok])
    return np.concatenate(kept)[:n], excluded


def _offset_value(x, beta, ctx: CellContext, spec: QuantizerSpec, nearest_is_floor):
    """``rescale(soft_assignment(x))`` minus a per-cell constant."""
    m_f, m_c = distance_probability(x, beta, ctx, spec)
    return rescale_slope(spec) * np.where(nearest_is_floor, m_c, -np.asarray(m_f))


def fixed_beta_audit(
    spec: QuantizerSpec, beta: float, n: int = 1000, h: float = 1e-6, seed: int = 0, margin: float = KINK_MARGIN
) -> AuditLine:
    rng = np.random.default_rng(seed)
    x, excluded = _sample_clear(rng, n, 0.0, spec.top, lambda v: v, margin)
    ctx = cell_context(x, spec)
    ones = np.ones_like(x)
    saved = DaqSaved(x, ctx, np.full_like(x, beta), spec.lam, ones, ones, ones, spec)
    analytic = np.asarray(daq_backward(saved, 1.0)[0])
    near_floor = x <= ctx.q_t
    up = _offset_value(x + h, beta, ctx, spec, near_floor)
    down = _offset_value(x - h, beta, ctx, spec, near_floor)
    numeric = (up - down) / (2 * h)
    return AuditLine(f"beta={beta:g}", float(_rel(analytic, numeric).max()), n, excluded)


def chain_audit(
    spec: QuantizerSpec,
    params: QuantizerParams = QuantizerParams(-1.3, 2.1),
    n: int = 1000,
    h: float = 1e-6,
    seed: int = 0,
    margin: float = KINK_MARGIN,
) -> list[AuditLine]:
    """Full quantizer at the adaptive temperature, w.r.t. input and both bounds."""
    rng = np.random.default_rng(seed)
    xhat, excluded = _sample_clear(
        rng, n, params.lower, params.upper, lambda v: np.asarray(normalize(v, params, spec)), margin
    )
    _, saved = daq_forward(xhat, params, spec)
    analytic = [np.asarray(g) for g in daq_backward(saved, 1.0)]
    ctx, beta = saved.ctx, saved.beta
    near_floor = saved.x <= ctx.q_t

    def value(xh, lo, hi):
        x = np.asarray(normalize(xh, QuantizerParams(lo, hi), spec))
        return _offset_value(x, beta, ctx, spec, near_floor)

    lo, hi = params.lower, params.upper
    numeric = [
        (value(xhat + h, lo, hi) - value(xhat - h, lo, hi)) / (2 * h),
        (value(xhat, lo + h, hi) - value(xhat, lo - h, hi)) / (2 * h),
        (value(xhat, lo, hi + h) - value(xhat, lo, hi - h)) / (2 * h),
    ]
    return [
        AuditLine(f"chain d/d{name}", float(_rel(a, b).max()), n, excluded)
        for name, a, b in zip(("xhat", "lower", "upper"), analytic, numeric)
    ]


def run_audit(
    bits: int = 2, betas=(4.0, 8.0, 12.0, 24.0), n: int = 1000, h: float = 1e-6, seed: int = 0, spec: QuantizerSpec | None = None
) -> AuditReport:
    spec = QuantizerSpec(bits) if spec is None else spec
    report = AuditReport()
    for beta in betas:
        report.lines.append(fixed_beta_audit(spec, beta, n, h, seed))
    report.lines.extend(chain_audit(spec, n=n, h=h, seed=seed))
    return report
