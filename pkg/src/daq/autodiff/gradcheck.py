"""Finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from daq.autodiff import ops
from daq.autodiff.layers import Network
from daq.autodiff.tensor import Tensor, backward


def rel_error(a: float, b: float, floor: float = 1e-300) -> float:
    """``|a - b| / max(|a|, |b|, floor)``.

    Network probes use ``floor=1e-6``: central differences of an O(1) loss
    carry ~1e-10 of rounding noise, so smaller gradients cannot be resolved.
    """
    scale = max(abs(a), abs(b), floor)
    return abs(a - b) / scale


def numeric_grad(f: Callable[[], float], t: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``t`` (perturbed in place)."""
    g = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


@dataclass
class ProbeResult:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    floor: float = 1e-6

    @property
    def rel_error(self) -> float:
        return rel_error(self.analytic, self.numeric, self.floor)


@dataclass
class NetworkProbe:
    results: list[ProbeResult] = field(default_factory=list)
    min_kink_distance: float = float("inf")

    @property
    def worst(self) -> float:
        return max((r.rel_error for r in self.results), default=0.0)


def kink_distance(net: Network) -> float:
    """Smallest distance of any captured normalized value to an integer kink.

    Values sitting exactly on the grid (clipped inputs) are ignored: the clip
    keeps them fixed under small perturbations.
    """
    best = float("inf")
    for q in net.quantizers():
        fz = q._frozen
        if fz is None:
            continue
        x = np.asarray(fz.x)
        d = np.abs(x - np.round(x))
        d = d[d > 0]
        if d.size:
            best = min(best, float(d.min()))
    return best


def probe_network(
    net: Network,
    x: Tensor,
    labels,
    *,
    n_params: int = 10,
    h: float = 1e-5,
    seed: int = 0,
    params: Sequence[Tensor] | None = None,
) -> NetworkProbe:
    """Compare analytic gradients of the cross-entropy loss with central differences.

    Quantizers are captured at the current parameters so the perturbed
    forwards evaluate each quantizer's smooth backward branch (see
    :meth:`FakeQuantizer.capture`).  ``n_params`` scalar entries are drawn
    uniformly from ``params`` (default: all network parameters).

    The default step is 1e-5 rather than 1e-6: the loss is O(1), so rounding
    noise in the difference quotient is ~eps/h, which at 1e-6 swamps the
    1e-9-sized gradients that sharp soft quantizers produce.
    """
    params = list(net.parameters() if params is None else params)
    net.release()
    net.capture()
    try:
        loss = ops.softmax_cross_entropy(net(x, "train"), labels)
        grads = backward(loss, params)
        report = NetworkProbe(min_kink_distance=kink_distance(net))
        sizes = np.array([p.size for p in params])
        rng = np.random.default_rng(seed)
        picks = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        for flat_idx in np.sort(picks):
            which = int(np.searchsorted(bounds, flat_idx, side="right"))
            p = params[which]
            local = int(flat_idx - (bounds[which - 1] if which else 0))
            idx = np.unravel_index(local, p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = ops.softmax_cross_entropy(net(x, "train"), labels).item()
            p.data[idx] = orig - h
            down = ops.softmax_cross_entropy(net(x, "train"), labels).item()
            p.data[idx] = orig
            report.results.append(
                ProbeResult(p.name or f"param{which}", tuple(int(i) for i in idx), float(grads[p][idx]), (up - down) / (2 * h))
            )
        return report
    finally:
        net.release()


def probe_clear_of_kinks(
    make_case: Callable[[int], tuple[Network, Tensor, np.ndarray]],
    *,
    margin: float = 1e-3,
    tries: int = 50,
    **probe_kwargs,
) -> NetworkProbe:
    """Run :func:`probe_network` on ``make_case(attempt) -> (net, x, labels)``
    until every captured normalized value is at least ``margin`` from an
    integer kink.

    Central differences with step ``h`` straddle a kink only within ``h`` of
    it, so a margin far above ``h`` is enough; requiring a wide margin for
    every element of a whole network would almost never succeed.  Cases
    should vary the weights as well as the batch, since weights near a kink
    are not cured by a new batch.
    """
    for attempt in range(tries):
        net, x, labels = make_case(attempt)
        report = probe_network(net, x, labels, **probe_kwargs)
        if report.min_kink_distance >= margin:
            return report
    raise RuntimeError(f"no case cleared the kink margin {margin} in {tries} tries")
