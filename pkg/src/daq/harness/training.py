"""Training, evaluation and ablation loops."""

from __future__ import annotations

import csv
import enum
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from daq.autodiff import ops
from daq.autodiff.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from daq.autodiff.layers import Network, QuantSettings
from daq.autodiff.optim import SGD, Adam, cosine_lr
from daq.autodiff.tensor import Tensor, backward
from daq.baselines import KindName, QuantizerKind, anneal_schedule
from daq.core import QuantizerParams
from daq.harness.config import RunConfig
from daq.harness.data import Dataset, DatasetError, load_idx, make_blobs

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "loss", "train_acc", "val_acc", "lr", "mean_gap", "mean_beta")
CHECKPOINT_NAME = "checkpoint.daq"
METRICS_NAME = "metrics.csv"
EVAL_BATCH = 256


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, grad_norms: dict[str, float]):
        norms = ", ".join(f"{k}={v:.3g}" for k, v in grad_norms.items())
        super().__init__(f"non-finite loss in epoch {epoch}; gradient norms: {norms}")
        self.epoch = epoch
        self.grad_norms = grad_norms


class EvalMode(str, enum.Enum):
    ROUNDING = "rounding"
    TRAINING = "training"  # the training-time quantizer at test time

    @property
    def forward_mode(self) -> str:
        return "round" if self is EvalMode.ROUNDING else "train"


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    lr: float
    layer_gap: dict[str, float] = field(default_factory=dict)
    layer_beta: dict[str, float] = field(default_factory=dict)

    @property
    def mean_gap(self) -> float:
        return float(np.mean(list(self.layer_gap.values()))) if self.layer_gap else 0.0

    @property
    def mean_beta(self) -> float:
        return float(np.mean(list(self.layer_beta.values()))) if self.layer_beta else float("nan")

    def row(self) -> dict[str, str]:
        values = (self.epoch, self.loss, self.train_acc, self.val_acc, self.lr, self.mean_gap, self.mean_beta)
        return {k: repr(v) if isinstance(v, float) else str(v) for k, v in zip(METRICS_COLUMNS, values)}


@dataclass
class TrainResult:
    network: Network
    config: RunConfig
    metrics: list[MetricsRecord]
    sample_shape: tuple[int, int, int]
    num_classes: int
    ms_per_iter: float
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


# --------------------------------------------------------------------------
# data and model construction
# --------------------------------------------------------------------------


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Return ``(train, val)`` per the config's data section."""
    d = cfg.data
    if d.source == "blobs":
        full = make_blobs(d.blobs_n, d.blobs_classes, d.blobs_dim, d.blobs_spread, seed=d.seed, val_fraction=d.val_fraction)
        return full.subset("train"), full.subset("val")
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        path = getattr(d, key)
        if path and not Path(path).exists():
            raise DatasetError(f"data.{key}: {path}: no such file")
    train = load_idx(d.train_images, d.train_labels, split="train")
    if d.test_images and d.test_labels:
        test = load_idx(d.test_images, d.test_labels, split="val", num_classes=train.num_classes)
        classes = max(train.num_classes, test.num_classes)
        train.num_classes = test.num_classes = classes
        return train, test
    rng = np.random.default_rng(d.seed)
    n_val = int(round(d.val_fraction * len(train)))
    if n_val == 0:
        return train, train
    split = np.full(len(train), "train")
    split[rng.permutation(len(train))[:n_val]] = "val"
    full = Dataset(train.images, train.labels, split, train.num_classes)
    return full.subset("train"), full.subset("val")


def build_network(cfg: RunConfig, sample_shape, num_classes: int) -> Network:
    q = cfg.quant
    settings = QuantSettings(gamma=q.gamma, sigma_weight=q.sigma_weight, sigma_activation=q.sigma_activation)
    return Network(cfg.network_specs(tuple(sample_shape), num_classes), seed=cfg.train.seed, dtype=cfg.train.dtype, settings=settings)


def init_quantizers(network: Network, calibration_batch) -> dict[str, dict[str, QuantizerParams]]:
    """Weights get ``(-3, 3)``; activations ``(+-3 sigma_A)``, or ``(0, 3 sigma_A)`` with a frozen lower bound after ReLU."""
    batch = calibration_batch if isinstance(calibration_batch, Tensor) else Tensor(calibration_batch)
    if batch.shape[0] == 0:
        raise DatasetError("calibration batch is empty")
    for layer in network.weight_layers():
        if layer.wq is not None and layer.wq.enabled:
            layer.wq.set_bounds(-3.0, 3.0, lower_trainable=True)
    network.calibrate(batch)
    out: dict[str, dict[str, QuantizerParams]] = {}
    for layer in network.weight_layers():
        entry = {}
        if layer.wq is not None and layer.wq.enabled:
            entry["weight"] = layer.wq.params()
        if layer.aq is not None and layer.aq.enabled:
            entry["activation"] = layer.aq.params()
        if entry:
            out[layer.name] = entry
    return out


def _apply_anneal(network: Network, epoch: int, epochs: int) -> None:
    for q in network.quantizers():
        if q.kind.name is KindName.ANNEAL:
            q.beta = anneal_schedule(epoch, epochs, q.kind)


def _grad_norms(network: Network, grads: dict) -> dict[str, float]:
    return {p.name: float(np.linalg.norm(grads[p])) for p in network.parameters() if p in grads}


def _load_pretrained(network: Network, path: str) -> None:
    ckpt = load_checkpoint(path)
    for layer in network.weight_layers():
        for t in (layer.weight, layer.bias):
            src = ckpt.tensors.get(t.name)
            if src is None or src.shape != t.shape:
                raise DatasetError(f"pretrained checkpoint {path} has no compatible tensor {t.name}")
            t.data[...] = src


# --------------------------------------------------------------------------
# train / evaluate
# --------------------------------------------------------------------------


def evaluate(model, dataset: Dataset, mode: EvalMode | str = EvalMode.ROUNDING) -> float:
    """Top-1 accuracy of a network (or checkpoint path) on ``dataset``."""
    mode = EvalMode(mode)
    network = load_network(model)[0] if isinstance(model, (str, Path)) else model
    correct = 0
    for start in range(0, len(dataset), EVAL_BATCH):
        x = Tensor(dataset.images[start : start + EVAL_BATCH], dtype=network.dtype)
        try:
            logits = network(x, mode.forward_mode)
        except ValueError as exc:
            raise DatasetError(f"dataset does not fit the network: {exc}") from None
        correct += int((logits.data.argmax(axis=1) == dataset.labels[start : start + EVAL_BATCH]).sum())
    return correct / len(dataset)


def _run(cfg: RunConfig, train_ds: Dataset, val_ds: Dataset, lr_weights: float) -> TrainResult:
    t = cfg.train
    rng = np.random.default_rng(t.seed)
    net = build_network(cfg, train_ds.sample_shape, train_ds.num_classes)
    if t.pretrained:
        _load_pretrained(net, t.pretrained)
    order = rng.permutation(len(train_ds))
    init_quantizers(net, train_ds.images[order[: t.batch_size]])

    sgd = SGD(net.weights(), lr=lr_weights, momentum=t.momentum, weight_decay=t.weight_decay)
    adam = Adam(net.quant_params(), lr=t.lr_quant)
    steps_per_epoch = math.ceil(len(train_ds) / t.batch_size)
    total_steps = t.epochs * steps_per_epoch
    step = 0
    metrics: list[MetricsRecord] = []
    elapsed = 0.0
    for epoch in range(t.epochs):
        _apply_anneal(net, epoch, t.epochs)
        net.reset_stats()
        order = rng.permutation(len(train_ds))
        loss_sum = 0.0
        correct = 0
        lr = lr_weights
        for start in range(0, len(train_ds), t.batch_size):
            idx = order[start : start + t.batch_size]
            tic = time.perf_counter()
            x = Tensor(train_ds.images[idx], dtype=t.dtype)
            logits = net(x, "train")
            loss = ops.softmax_cross_entropy(logits, train_ds.labels[idx])
            params = net.parameters()
            grads = backward(loss, params)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, _grad_norms(net, grads))
            lr = cosine_lr(step, total_steps, lr_weights)
            sgd.step(lr)
            adam.step(cosine_lr(step, total_steps, t.lr_quant))
            elapsed += time.perf_counter() - tic
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == train_ds.labels[idx]).sum())
        layer_gap = {q.name: q.mean_gap for q in net.quantizers()}
        layer_beta = {q.name: q.mean_beta for q in net.quantizers()}
        record = MetricsRecord(
            epoch=epoch,
            loss=loss_sum / len(train_ds),
            train_acc=correct / len(train_ds),
            val_acc=evaluate(net, val_ds, EvalMode.ROUNDING),
            lr=lr,
            layer_gap=layer_gap,
            layer_beta=layer_beta,
        )
        metrics.append(record)
        log.info(
            "epoch %d loss %.4f train_acc %.4f val_acc %.4f lr %.3g gap %.3g beta %.3g",
            epoch, record.loss, record.train_acc, record.val_acc, record.lr, record.mean_gap, record.mean_beta,
        )
    return TrainResult(net, cfg, metrics, train_ds.sample_shape, train_ds.num_classes, 1000.0 * elapsed / max(step, 1))


def train(cfg: RunConfig, *, datasets: tuple[Dataset, Dataset] | None = None, out_dir=None, write: bool = True) -> TrainResult:
    """Train per ``cfg``.  Writes ``checkpoint.daq`` and ``metrics.csv`` to the output dir when ``write``.

    A non-finite loss in epoch 0 restarts the run once with the weight
    learning rate divided by 10; any later divergence is fatal.
    """
    cfg.validate()
    train_ds, val_ds = datasets if datasets is not None else load_datasets(cfg)
    try:
        result = _run(cfg, train_ds, val_ds, cfg.train.lr_weights)
    except TrainingDiverged as exc:
        if exc.epoch != 0:
            raise
        log.warning("%s; retrying with weight lr %.3g", exc, cfg.train.lr_weights / 10)
        result = _run(cfg, train_ds, val_ds, cfg.train.lr_weights / 10)
    if write:
        out = Path(out_dir) if out_dir is not None else cfg.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = save_network(result, out / CHECKPOINT_NAME)
        result.metrics_path = write_metrics_csv(result.metrics, out / METRICS_NAME)
    return result


def write_metrics_csv(metrics: Sequence[MetricsRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for record in metrics:
            writer.writerow(record.row())
    return path


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_network(result: TrainResult, path) -> Path:
    net = result.network
    records = []
    for layer in net.weight_layers():
        for q in layer.quantizers():
            records.append(
                {
                    "layer": layer.name,
                    "role": q.role.value,
                    "bits": q.bits,
                    "kind": str(q.kind),
                    "lower": float(q.lower.data[0]),
                    "upper": float(q.upper.data[0]),
                    "scale": float(layer.scale.data[0]),
                    "lower_trainable": q.lower_trainable,
                }
            )
    ckpt = Checkpoint(
        seed=result.config.train.seed,
        epoch=len(result.metrics),
        tensors={name: t.data for name, t in net.named_tensors().items()},
        quantizers=records,
        meta={
            "config": result.config.to_flat(),
            "sample_shape": list(result.sample_shape),
            "num_classes": result.num_classes,
        },
    )
    return save_checkpoint(path, ckpt)


def load_network(path) -> tuple[Network, RunConfig, Checkpoint]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_flat(ckpt.meta["config"])
    net = build_network(cfg, ckpt.meta["sample_shape"], ckpt.meta["num_classes"])
    named = net.named_tensors()
    for name, t in named.items():
        if name not in ckpt.tensors:
            raise DatasetError(f"checkpoint {path} is missing tensor {name}")
        t.data[...] = ckpt.tensors[name]
    by_layer = {(r["layer"], r["role"]): r for r in ckpt.quantizers}
    for layer in net.weight_layers():
        for q in layer.quantizers():
            rec = by_layer.get((layer.name, q.role.value))
            if rec is not None:
                q.lower.requires_grad = rec["lower_trainable"]
    return net, cfg, ckpt


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

ABLATION_COLUMNS = (
    "variant",
    "acc_rounding_mean",
    "acc_rounding_std",
    "acc_training_mean",
    "acc_training_std",
    "gap",
    "final_beta",
    "ms_per_iter",
)


def default_variants() -> list[QuantizerKind]:
    return [
        QuantizerKind.daq(),
        *(QuantizerKind.kernel(b) for b in (4, 8, 12, 24)),
        *(QuantizerKind.plain(b) for b in (10, 20, 60)),
        QuantizerKind.sigmoid(4),
        QuantizerKind.ste(),
        QuantizerKind.ste_dasr(),
        QuantizerKind.annealed(2, 48),
    ]


@dataclass
class AblationRow:
    variant: QuantizerKind
    acc_rounding: list[float]
    acc_training: list[float]
    gaps: list[float]
    final_betas: list[float]
    ms_per_iter: list[float]

    def as_dict(self) -> dict[str, str]:
        values = (
            str(self.variant),
            float(np.mean(self.acc_rounding)),
            float(np.std(self.acc_rounding)),
            float(np.mean(self.acc_training)),
            float(np.std(self.acc_training)),
            float(np.mean(self.gaps)),
            float(np.mean(self.final_betas)),
            float(np.mean(self.ms_per_iter)),
        )
        return {k: (repr(v) if isinstance(v, float) else v) for k, v in zip(ABLATION_COLUMNS, values)}


def ablate(base: RunConfig, variants: Sequence[QuantizerKind], seeds: Sequence[int], *, datasets=None) -> list[AblationRow]:
    """Train every variant once per seed; both quantizers of each layer use the variant."""
    if not seeds:
        raise ValueError("ablate needs at least one seed")
    datasets = datasets if datasets is not None else load_datasets(base)
    val = datasets[1]
    rows = []
    for variant in variants:
        row = AblationRow(variant, [], [], [], [], [])
        for seed in seeds:
            cfg = RunConfig.from_flat(base.to_flat())
            cfg.set("quant.weight_kind", str(variant))
            cfg.set("quant.activation_kind", str(variant))
            cfg.set("train.seed", seed)
            result = train(cfg, datasets=datasets, write=False)
            row.acc_rounding.append(evaluate(result.network, val, EvalMode.ROUNDING))
            row.acc_training.append(evaluate(result.network, val, EvalMode.TRAINING))
            row.gaps.append(result.metrics[-1].mean_gap)
            row.final_betas.append(result.metrics[-1].mean_beta)
            row.ms_per_iter.append(result.ms_per_iter)
        log.info("ablation %s: rounding %.4f training %.4f", variant, np.mean(row.acc_rounding), np.mean(row.acc_training))
        rows.append(row)
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_dict())
    return path
