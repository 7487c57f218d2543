"""Layers and the sequential network used by the training harness."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from daq.autodiff import ops
from daq.autodiff.quant import FULL_PRECISION, FakeQuantizer
from daq.autodiff.tensor import Tensor
from daq.baselines import QuantizerKind
from daq.core import Role

log = logging.getLogger(__name__)


class LayerKind(str, enum.Enum):
    DENSE = "dense"
    CONV2D = "conv2d"
    RELU = "relu"
    FLATTEN = "flatten"


@dataclass
class LayerSpec:
    """One layer of a sequential network.

    ``in_dim``/``out_dim`` are features for dense layers and channels for
    conv layers.  A quantizer kind with bits 32 means full precision.
    """

    kind: LayerKind
    in_dim: int = 0
    out_dim: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    weight_quantizer: QuantizerKind | None = None
    activation_quantizer: QuantizerKind | None = None
    weight_bits: int = FULL_PRECISION
    activation_bits: int = FULL_PRECISION

    def __post_init__(self):
        self.kind = LayerKind(self.kind)

    @property
    def has_weights(self) -> bool:
        return self.kind in (LayerKind.DENSE, LayerKind.CONV2D)

    @property
    def quantized(self) -> bool:
        return self.has_weights and (self.weight_quantizer is not None or self.activation_quantizer is not None)


@dataclass
class QuantSettings:
    gamma: float = 2.0
    sigma_weight: float = 1.0
    sigma_activation: float = 2.0


class ReLU:
    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return ops.relu(x)


class Flatten:
    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return ops.flatten(x)


class WeightLayer:
    """Dense or conv layer, optionally with weight/activation quantizers and a learnable scale.

    Quantized layers compute ``s * op(aq(x), wq(standardize(W))) + b``.
    """

    def __init__(self, spec: LayerSpec, name: str, rng: np.random.Generator, dtype, settings: QuantSettings):
        self.spec = spec
        self.name = name
        if spec.kind is LayerKind.DENSE:
            shape = (spec.out_dim, spec.in_dim)
            fan_in = spec.in_dim
        else:
            k = spec.kernel_size
            shape = (spec.out_dim, spec.in_dim, k, k)
            fan_in = spec.in_dim * k * k
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True, dtype=dtype, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(spec.out_dim), requires_grad=True, dtype=dtype, name=f"{name}.bias")
        self.wq: FakeQuantizer | None = None
        self.aq: FakeQuantizer | None = None
        self.scale: Tensor | None = None
        if spec.quantized:
            if spec.weight_quantizer is not None:
                self.wq = FakeQuantizer(
                    spec.weight_bits,
                    spec.weight_quantizer,
                    Role.WEIGHT,
                    gamma=settings.gamma,
                    kernel_sigma=settings.sigma_weight,
                    name=f"{name}.wq",
                )
            if spec.activation_quantizer is not None:
                self.aq = FakeQuantizer(
                    spec.activation_bits,
                    spec.activation_quantizer,
                    Role.ACTIVATION,
                    gamma=settings.gamma,
                    kernel_sigma=settings.sigma_activation,
                    name=f"{name}.aq",
                )
            self.scale = Tensor([1.0], requires_grad=True, dtype=dtype, name=f"{name}.scale")
        self.post_relu = False

    @property
    def quantized(self) -> bool:
        return self.scale is not None

    def quantizers(self) -> list[FakeQuantizer]:
        return [q for q in (self.wq, self.aq) if q is not None and q.enabled]

    def weights(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def quant_params(self) -> list[Tensor]:
        params = [p for q in self.quantizers() for p in q.parameters()]
        if self.scale is not None:
            params.append(self.scale)
        return params

    def calibrate(self, x: Tensor) -> None:
        """Set activation bounds from the std of this layer's input batch."""
        if self.aq is None or not self.aq.enabled:
            return
        sigma = float(np.std(x.data))
        if not sigma > 0:
            log.warning("%s: zero-variance calibration activations, falling back to sigma_A=1", self.name)
            sigma = 1.0
        if self.post_relu:
            self.aq.set_bounds(0.0, 3.0 * sigma, lower_trainable=False)
        else:
            self.aq.set_bounds(-3.0 * sigma, 3.0 * sigma, lower_trainable=True)

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        if not self.quantized:
            return self._op(x, self.weight, self.bias)
        w = ops.weight_standardize(self.weight)
        if self.wq is not None:
            w = self.wq(w, mode)
        a = self.aq(x, mode) if self.aq is not None else x
        out = ops.mul(self._op(a, w, None), self.scale)
        return ops.add(out, self._bias_view())

    def _bias_view(self) -> Tensor:
        if self.spec.kind is LayerKind.DENSE:
            return self.bias
        return ops.reshape(self.bias, (1, -1, 1, 1))

    def _op(self, x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
        if self.spec.kind is LayerKind.DENSE:
            return ops.dense(x, w, b)
        return ops.conv2d(x, w, b, stride=self.spec.stride, padding=self.spec.padding)


def quantized_conv(x: Tensor, w: Tensor, wq: FakeQuantizer | None, aq: FakeQuantizer | None, s: Tensor, *, stride: int = 1, padding: int = 0, mode: str = "train") -> Tensor:
    """``s * conv2d(aq(x), wq(w))`` for an already standardized ``w``.

    A quantizer built with 32 bits (or ``None``) passes its input through.
    """
    if wq is not None:
        w = wq(w, mode)
    if aq is not None:
        x = aq(x, mode)
    return ops.mul(ops.conv2d(x, w, None, stride=stride, padding=padding), s)


def build_layer(spec: LayerSpec, name: str, rng: np.random.Generator, dtype, settings: QuantSettings):
    if spec.kind is LayerKind.RELU:
        return ReLU()
    if spec.kind is LayerKind.FLATTEN:
        return Flatten()
    return WeightLayer(spec, name, rng, dtype, settings)


@dataclass
class Network:
    """Sequential stack of layers built from :class:`LayerSpec` entries."""

    specs: list[LayerSpec]
    seed: int = 0
    dtype: str = "f64"
    settings: QuantSettings = field(default_factory=QuantSettings)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.layers = []
        prev_relu = False
        for i, spec in enumerate(self.specs):
            layer = build_layer(spec, f"layer{i}", rng, self.dtype, self.settings)
            if isinstance(layer, WeightLayer):
                layer.post_relu = prev_relu
            if spec.kind is LayerKind.RELU:
                prev_relu = True
            elif spec.kind is not LayerKind.FLATTEN:
                prev_relu = False
            self.layers.append(layer)

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        for layer in self.layers:
            x = layer(x, mode)
        return x

    def weight_layers(self) -> list[WeightLayer]:
        return [layer for layer in self.layers if isinstance(layer, WeightLayer)]

    def weights(self) -> list[Tensor]:
        return [p for layer in self.weight_layers() for p in layer.weights()]

    def quant_params(self) -> list[Tensor]:
        return [p for layer in self.weight_layers() for p in layer.quant_params()]

    def parameters(self) -> list[Tensor]:
        return self.weights() + self.quant_params()

    def quantizers(self) -> list[FakeQuantizer]:
        return [q for layer in self.weight_layers() for q in layer.quantizers()]

    def named_tensors(self) -> dict[str, Tensor]:
        """Every stored tensor, including frozen lower bounds."""
        named: dict[str, Tensor] = {}
        for layer in self.weight_layers():
            named[layer.weight.name] = layer.weight
            named[layer.bias.name] = layer.bias
            if layer.scale is not None:
                named[layer.scale.name] = layer.scale
            for q in layer.quantizers():
                named[q.lower.name] = q.lower
                named[q.upper.name] = q.upper
        return named

    def calibrate(self, x: Tensor) -> None:
        """Initialize activation quantizers layer by layer on one batch.

        Each layer is calibrated on the input it actually sees, i.e. with the
        quantizers of earlier layers already initialized and active.
        """
        for layer in self.layers:
            if isinstance(layer, WeightLayer):
                layer.calibrate(x)
            x = layer(x, "round")

    def capture(self) -> None:
        for q in self.quantizers():
            q.capture()

    def release(self) -> None:
        for q in self.quantizers():
            q.release()

    def reset_stats(self) -> None:
        for q in self.quantizers():
            q.reset_stats()

    def set_beta(self, beta: float | None) -> None:
        for q in self.quantizers():
            q.beta = beta
