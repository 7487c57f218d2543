import csv
import logging
import warnings

import numpy as np
import pytest

from daq.autodiff import Tensor
from daq.autodiff.layers import LayerKind, LayerSpec, Network
from daq.baselines import QuantizerKind
from daq.harness.config import ConfigError, RunConfig, load_config, read_config_file
from daq.harness.data import Dataset, DatasetError
from daq.harness.training import (
    ABLATION_COLUMNS,
    METRICS_COLUMNS,
    EvalMode,
    TrainingDiverged,
    ablate,
    build_network,
    default_variants,
    evaluate,
    init_quantizers,
    load_datasets,
    load_network,
    train,
    write_ablation_csv,
)

ONE_BIT = {"quant.weight_bits": 1, "quant.activation_bits": 1}


def small(**overrides) -> RunConfig:
    flat = {"train.epochs": 5, "data.blobs_n": 300}
    flat.update(overrides)
    return RunConfig().update(flat).validate()


# -- config ------------------------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(
        "train.epochs = 7  # top-level dotted key\n"
        "\n[quant]\nweight_bits = 1\nweight_kind = kernel:4\n"
        "[model]\nquantize_all = yes\n"
    )
    assert read_config_file(path)["quant.weight_kind"] == "kernel:4"
    cfg = load_config(path, {"train.epochs": "9", "quant.activation_bits": "2"})
    assert cfg.train.epochs == 9
    assert cfg.quant.weight_bits == 1 and cfg.quant.activation_bits == 2
    assert cfg.model.quantize_all is True
    assert cfg.weight_kind == QuantizerKind.kernel(4)


@pytest.mark.parametrize(
    "key,value",
    [
        ("quant.weight_bits", 9),
        ("quant.activation_bits", 0),
        ("train.epochs", 0),
        ("quant.weight_kind", "lsq"),
        ("train.dtype", "f16"),
        ("model.network", "resnet"),
        ("train.lr_weights", -1),
        ("data.source", "idx"),
    ],
)
def test_config_validation(key, value):
    with pytest.raises(ConfigError):
        RunConfig().update({key: value}).validate()


def test_config_unknown_key_and_bad_type(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig().set("train.nope", 1)
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig().set("train.epochs", "many")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.ini")


def test_config_flat_round_trip():
    cfg = small(**ONE_BIT, **{"quant.weight_kind": "anneal:2:48"})
    assert RunConfig.from_flat(cfg.to_flat()) == cfg


def test_output_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("DAQ_OUTPUT_DIR", str(tmp_path))
    assert RunConfig().output_dir() == tmp_path
    cfg = RunConfig()
    cfg.set("output.dir", "elsewhere")
    assert str(cfg.output_dir()) == "elsewhere"


@pytest.mark.parametrize("network,shape", [("mlp", (8, 1, 1)), ("convnet", (1, 28, 28))])
def test_first_and_last_layers_unquantized(network, shape):
    cfg = RunConfig().update({"model.network": network, **ONE_BIT})
    specs = [s for s in cfg.network_specs(shape, 10) if s.has_weights]
    assert not specs[0].quantized and not specs[-1].quantized
    assert all(s.quantized for s in specs[1:-1])
    cfg.set("model.quantize_all", True)
    assert all(s.quantized for s in cfg.network_specs(shape, 10) if s.has_weights)


def test_full_precision_has_no_quantizers():
    net = build_network(RunConfig(), (8, 1, 1), 4)
    assert net.quantizers() == [] and net.quant_params() == []


def test_convnet_forward_shape():
    cfg = RunConfig().update({"model.network": "convnet", **ONE_BIT})
    net = build_network(cfg, (1, 12, 12), 10)
    assert net(Tensor(np.zeros((2, 1, 12, 12)))).shape == (2, 10)


# -- quantizer initialization ------------------------------------------------------


def calib_net():
    one = dict(weight_quantizer=QuantizerKind.daq(), activation_quantizer=QuantizerKind.daq(), weight_bits=2, activation_bits=2)
    net = Network(
        [
            LayerSpec(LayerKind.DENSE, 2, 2, **one),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.DENSE, 2, 2, **one),
        ]
    )
    return net


def test_init_quantizers_exact():
    net = calib_net()
    # the first activation quantizer sees the raw batch, whose std is exactly 1
    first, second = net.weight_layers()
    batch = np.array([[1.0, 1.0], [-1.0, -1.0]])
    init = init_quantizers(net, batch)
    assert set(init) == {first.name, second.name}
    for layer in (first, second):
        w = init[layer.name]["weight"]
        assert (w.lower, w.upper) == (-3.0, 3.0)
    a0 = init[first.name]["activation"]
    assert (a0.lower, a0.upper) == (-3.0, 3.0)
    assert first.aq.lower_trainable


def test_init_post_relu_half_sigma():
    # hand-built: post-ReLU activations in {0, 1} with equal counts have std 0.5
    net = Network(
        [
            LayerSpec(LayerKind.DENSE, 2, 2),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.DENSE, 2, 2, weight_quantizer=QuantizerKind.daq(), activation_quantizer=QuantizerKind.daq(), weight_bits=1, activation_bits=1),
        ]
    )
    first, second = net.weight_layers()
    first.weight.data[...] = np.eye(2)
    first.bias.data[...] = 0.0
    init = init_quantizers(net, np.array([[1.0, 1.0], [0.0, 0.0]]))
    a = init[second.name]["activation"]
    assert (a.lower, a.upper) == (0.0, 1.5)
    assert not second.aq.lower_trainable
    assert (init[second.name]["weight"].lower, init[second.name]["weight"].upper) == (-3.0, 3.0)


def test_init_zero_variance_falls_back(caplog):
    net = calib_net()
    with caplog.at_level(logging.WARNING):
        init = init_quantizers(net, np.zeros((4, 2)))
    assert (init[net.weight_layers()[0].name]["activation"].upper) == 3.0
    assert "zero-variance" in caplog.text


def test_init_rejects_empty_batch():
    with pytest.raises(DatasetError):
        init_quantizers(calib_net(), np.zeros((0, 2)))


# -- training ----------------------------------------------------------------------


def test_full_precision_reaches_99_percent():
    cfg = RunConfig().update({"train.epochs": 200, "data.blobs_n": 600})
    result = train(cfg, write=False)
    assert max(m.train_acc for m in result.metrics) >= 0.99
    assert next(i for i, m in enumerate(result.metrics) if m.train_acc >= 0.99) < 200


def test_daq_gap_zero_every_epoch():
    result = train(small(**ONE_BIT), write=False)
    assert len(result.metrics) == 5
    for m in result.metrics:
        assert m.layer_gap and all(g == 0.0 for g in m.layer_gap.values())
        assert 0 <= m.train_acc <= 1 and 0 <= m.val_acc <= 1


def test_soft_kind_reports_positive_gap():
    result = train(small(**ONE_BIT, **{"quant.weight_kind": "kernel:4", "quant.activation_kind": "kernel:4"}), write=False)
    assert all(m.mean_gap > 0 for m in result.metrics)
    assert all(m.mean_beta == 4.0 for m in result.metrics)


def test_determinism(tmp_path):
    cfg = small(**ONE_BIT)
    a = train(cfg, out_dir=tmp_path / "a")
    b = train(RunConfig.from_flat(cfg.to_flat()), out_dir=tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    for (na, ta), (nb, tb) in zip(a.network.named_tensors().items(), b.network.named_tensors().items()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


def test_metrics_csv_schema(tmp_path):
    result = train(small(), out_dir=tmp_path)
    rows = list(csv.reader(result.metrics_path.open()))
    assert tuple(rows[0]) == METRICS_COLUMNS == ("epoch", "loss", "train_acc", "val_acc", "lr", "mean_gap", "mean_beta")
    assert len(rows) == 1 + 5
    assert [int(r[0]) for r in rows[1:]] == list(range(5))


@pytest.mark.parametrize("kind", ["daq", "kernel:4", "anneal"])
def test_checkpoint_round_trip_exact(tmp_path, kind):
    cfg = small(**ONE_BIT, **{"quant.weight_kind": kind, "quant.activation_kind": kind})
    result = train(cfg, out_dir=tmp_path)
    _, val = load_datasets(cfg)
    net, cfg2, ckpt = load_network(result.checkpoint_path)
    assert cfg2 == cfg and ckpt.seed == cfg.train.seed and ckpt.epoch == 5
    assert {(r["layer"], r["role"]) for r in ckpt.quantizers} == {(q.name.split(".")[0], q.role.value) for q in result.network.quantizers()}
    for mode in EvalMode:
        assert evaluate(net, val, mode) == evaluate(result.network, val, mode)
        assert evaluate(result.checkpoint_path, val, mode) == evaluate(result.network, val, mode)
    x = Tensor(val.images)
    np.testing.assert_array_equal(net(x, "round").data, result.network(x, "round").data)


def test_pretrained_initialization(tmp_path):
    fp = train(small(), out_dir=tmp_path / "fp")
    cfg = small(**ONE_BIT, **{"train.pretrained": str(fp.checkpoint_path), "train.epochs": 1})
    net = build_network(cfg, (8, 1, 1), 4)
    from daq.harness.training import _load_pretrained

    _load_pretrained(net, str(fp.checkpoint_path))
    np.testing.assert_array_equal(net.weight_layers()[0].weight.data, fp.network.weight_layers()[0].weight.data)
    assert train(cfg, write=False).metrics


def test_divergence_reports_gradient_norms():
    cfg = small(**{"train.lr_weights": 1e200})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(TrainingDiverged) as info:
            train(cfg, write=False)
    assert info.value.epoch == 0
    assert "layer1.weight" in info.value.grad_norms


def test_untrained_model_is_at_chance():
    rng = np.random.default_rng(0)
    n = 4000
    # labels independent of the inputs
    ds = Dataset(rng.normal(size=(n, 8, 1, 1)), np.arange(n) % 10, np.full(n, "val"), 10)
    accs = [evaluate(build_network(small(**{"train.seed": s}), (8, 1, 1), 10), ds) for s in range(5)]
    for acc in accs:
        assert acc == pytest.approx(0.1, abs=0.05)


def test_evaluate_modes_agree_for_daq_only():
    cfg = small(**ONE_BIT, **{"train.epochs": 10})
    _, val = load_datasets(cfg)
    result = train(cfg, write=False)
    assert evaluate(result.network, val, "rounding") == evaluate(result.network, val, "training")


# -- ablation ----------------------------------------------------------------------


def test_default_variants():
    assert [str(v) for v in default_variants()] == [
        "daq", "kernel:4", "kernel:8", "kernel:12", "kernel:24", "plain:10", "plain:20", "plain:60",
        "sigmoid:4", "ste", "ste_dasr:4", "anneal:2:48",
    ]  # fmt: skip


def test_ablation_table(tmp_path):
    variants = [QuantizerKind.daq(), QuantizerKind.kernel(4), QuantizerKind.annealed(2, 48)]
    rows = ablate(small(**ONE_BIT, **{"train.epochs": 3}), variants, seeds=[0, 1])
    assert len(rows) == len(variants)
    daq, kernel, anneal = (r.as_dict() for r in rows)
    assert float(daq["gap"]) == 0.0
    assert daq["acc_rounding_mean"] == daq["acc_training_mean"]
    assert float(kernel["gap"]) > 0
    assert float(anneal["final_beta"]) == 48.0
    path = write_ablation_csv(rows, tmp_path / "t.csv")
    table = list(csv.reader(path.open()))
    assert tuple(table[0]) == ABLATION_COLUMNS
    assert [r[0] for r in table[1:]] == ["daq", "kernel:4", "anneal:2:48"]


def test_ablation_needs_seeds():
    with pytest.raises(ValueError):
        ablate(small(), [QuantizerKind.daq()], seeds=[])
