"""Run configuration.

Config files are INI-style key/value text.  Keys are addressed as
``section.key`` and may be written either under a ``[section]`` header or as
dotted keys at the top of the file::

    train.epochs = 20

    [quant]
    weight_bits = 1
    weight_kind = daq

Every key can be overridden on the command line with ``--section.key VALUE``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from daq.autodiff.layers import LayerKind, LayerSpec
from daq.baselines import QuantizerKind, parse_kind

VALID_BITS = set(range(1, 9)) | {32}
ENV_OUTPUT_DIR = "DAQ_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    network: str = "mlp"  # mlp | convnet
    hidden: int = 64
    quantize_all: bool = False


@dataclass
class DataConfig:
    source: str = "blobs"  # blobs | idx
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    blobs_n: int = 600
    blobs_classes: int = 4
    blobs_dim: int = 8
    blobs_spread: float = 1.0
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class QuantConfig:
    weight_bits: int = 32
    activation_bits: int = 32
    weight_kind: str = "daq"
    activation_kind: str = "daq"
    gamma: float = 2.0
    sigma_weight: float = 1.0
    sigma_activation: float = 2.0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_weights: float = 1e-2
    lr_quant: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    dtype: str = "f64"
    pretrained: str = ""


@dataclass
class OutputConfig:
    dir: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    # -- flat key access ----------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        out = []
        for sec in dataclasses.fields(cls):
            for f in dataclasses.fields(sec.default_factory()):
                out.append(f"{sec.name}.{f.name}")
        return out

    def to_flat(self) -> dict[str, Any]:
        return {
            f"{sec}.{key}": value
            for sec, body in dataclasses.asdict(self).items()
            for key, value in body.items()
        }

    def set(self, key: str, value: Any) -> None:
        section, _, name = key.partition(".")
        if key not in self.keys():
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(self, section)
        current = getattr(target, name)
        setattr(target, name, _coerce(key, value, type(current)))

    def update(self, overrides: dict[str, Any]) -> "RunConfig":
        for key, value in overrides.items():
            self.set(key, value)
        return self

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        return cls().update(flat).validate()

    # -- validation ---------------------------------------------------------

    @property
    def weight_kind(self) -> QuantizerKind:
        return parse_kind(self.quant.weight_kind)

    @property
    def activation_kind(self) -> QuantizerKind:
        return parse_kind(self.quant.activation_kind)

    @property
    def full_precision(self) -> bool:
        return self.quant.weight_bits == 32 and self.quant.activation_bits == 32

    def validate(self) -> "RunConfig":
        q, t, m, d = self.quant, self.train, self.model, self.data
        for name in ("weight_bits", "activation_bits"):
            if getattr(q, name) not in VALID_BITS:
                raise ConfigError(f"quant.{name} must be in 1..8 or 32, got {getattr(q, name)}")
        for name in ("weight_kind", "activation_kind"):
            try:
                parse_kind(getattr(q, name))
            except ValueError as exc:
                raise ConfigError(f"quant.{name}: {exc}") from None
        if not q.gamma > 0 or not q.sigma_weight > 0 or not q.sigma_activation > 0:
            raise ConfigError("quant.gamma and kernel sigmas must be positive")
        if t.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {t.epochs}")
        if t.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {t.batch_size}")
        if not t.lr_weights > 0 or not t.lr_quant > 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= t.momentum < 1:
            raise ConfigError(f"train.momentum must be in [0, 1), got {t.momentum}")
        if t.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if t.dtype not in ("f32", "f64"):
            raise ConfigError(f"train.dtype must be f32 or f64, got {t.dtype!r}")
        if m.network not in ("mlp", "convnet"):
            raise ConfigError(f"model.network must be mlp or convnet, got {m.network!r}")
        if m.hidden < 1:
            raise ConfigError("model.hidden must be >= 1")
        if d.source not in ("blobs", "idx"):
            raise ConfigError(f"data.source must be blobs or idx, got {d.source!r}")
        if d.source == "idx" and not (d.train_images and d.train_labels):
            raise ConfigError("data.source = idx needs data.train_images and data.train_labels")
        if not 0 <= d.val_fraction < 1:
            raise ConfigError("data.val_fraction must be in [0, 1)")
        return self

    # -- network ------------------------------------------------------------

    def network_specs(self, sample_shape: tuple[int, int, int], num_classes: int) -> list[LayerSpec]:
        """Reference networks with first and last layers left full precision unless ``quantize_all``."""
        c, h, w = sample_shape
        hidden = self.model.hidden
        if self.model.network == "mlp":
            layers = [
                LayerSpec(LayerKind.FLATTEN),
                LayerSpec(LayerKind.DENSE, c * h * w, hidden),
                LayerSpec(LayerKind.RELU),
                LayerSpec(LayerKind.DENSE, hidden, hidden),
                LayerSpec(LayerKind.RELU),
                LayerSpec(LayerKind.DENSE, hidden, num_classes),
            ]
        else:
            h2, w2 = (h + 1) // 2, (w + 1) // 2
            layers = [
                LayerSpec(LayerKind.CONV2D, c, 8, kernel_size=3, padding=1),
                LayerSpec(LayerKind.RELU),
                LayerSpec(LayerKind.CONV2D, 8, 16, kernel_size=3, stride=2, padding=1),
                LayerSpec(LayerKind.RELU),
                LayerSpec(LayerKind.FLATTEN),
                LayerSpec(LayerKind.DENSE, 16 * h2 * w2, hidden),
                LayerSpec(LayerKind.RELU),
                LayerSpec(LayerKind.DENSE, hidden, num_classes),
            ]
        if self.full_precision:
            return layers
        weighted = [i for i, spec in enumerate(layers) if spec.has_weights]
        targets = weighted if self.model.quantize_all else weighted[1:-1]
        for i in targets:
            spec = layers[i]
            spec.weight_quantizer = self.weight_kind
            spec.activation_quantizer = self.activation_kind
            spec.weight_bits = self.quant.weight_bits
            spec.activation_bits = self.quant.activation_bits
        return layers

    def output_dir(self) -> Path:
        return Path(self.output.dir or os.environ.get(ENV_OUTPUT_DIR, "runs"))


def _coerce(key: str, value: Any, typ: type) -> Any:
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None
    return text


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[key if section == "__top__" else f"{section}.{key}"] = value
    return flat


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg.update(read_config_file(path))
    if overrides:
        cfg.update(overrides)
    return cfg.validate()
