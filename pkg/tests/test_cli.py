import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from daq.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    return header, body


# -- curves --------------------------------------------------------------------------


def test_curves_columns(capsys):
    code, out, _ = run(capsys, "curves", "--quiet", "--quantizers", "daq,kernel,sigmoid:4", "--betas", "4,24", "--samples", "101", "--derivatives")
    assert code == 0
    header, body = read_csv(out)
    assert header == ["x", "rounding", "daq", "beta_star", "d_daq", "kernel:4", "d_kernel:4", "kernel:24", "d_kernel:24", "sigmoid:4", "d_sigmoid:4"]
    assert body.shape == (101, len(header))
    col = dict(zip(header, body.T))
    assert np.all(np.diff(col["x"]) > 0)
    assert col["x"][0] == 0 and col["x"][-1] == 1
    np.testing.assert_array_equal(col["daq"], col["rounding"])
    assert col["sigmoid:4"][50] == 0.5  # x = q_t
    dev = lambda c: np.max(np.abs(col[c] - col["rounding"]))  # noqa: E731
    assert dev("kernel:24") < dev("kernel:4")
    assert np.all(col["beta_star"] > 0)


def test_curves_higher_bits_to_file(capsys, tmp_path):
    out_path = tmp_path / "sub" / "c.csv"
    code, out, _ = run(capsys, "curves", "--bits", "3", "--quantizers", "daq,plain:20", "--out", str(out_path))
    assert code == 0 and out == ""
    header, body = read_csv(out_path.read_text())
    assert header == ["x", "rounding", "daq", "beta_star", "plain:20"]
    assert body.shape == (2001, 5)
    assert body[-1, 0] == 7.0
    np.testing.assert_array_equal(body[:, 2], body[:, 1])


def test_curves_unknown_quantizer(capsys):
    code, _, err = run(capsys, "curves", "--quantizers", "daq,lsq")
    assert code == 2
    assert "usage:" in err and "valid names: daq, kernel, plain, sigmoid, ste, ste_dasr, anneal" in err


def test_curves_too_few_samples(capsys):
    assert run(capsys, "curves", "--samples", "1")[0] == 2


# -- gapcheck ------------------------------------------------------------------------


def test_gapcheck_daq_zero(capsys):
    code, out, _ = run(capsys, "gapcheck", "--quantizer", "daq", "--bits", "4", "--expect-zero")
    assert code == 0
    assert "gap=0.0" in out and "max_deviation=0.0" in out


def test_gapcheck_sigmoid_nonzero(capsys):
    code, out, _ = run(capsys, "gapcheck", "--quantizer", "sigmoid:4", "--expect-zero")
    assert code == 1
    gap = float(out.split("gap=")[1].split()[0])
    assert gap == pytest.approx(0.2831, abs=2e-3)
    assert run(capsys, "gapcheck", "--quantizer", "sigmoid:4")[0] == 0


@pytest.mark.parametrize("args", [["--samples", "0"], ["--quantizer", "nope"], ["--bits", "9"]])
def test_gapcheck_usage_errors(capsys, args):
    assert run(capsys, "gapcheck", *args)[0] == 2


def test_gapcheck_deterministic(capsys):
    a = run(capsys, "gapcheck", "--quantizer", "kernel:4", "--seed", "3", "--samples", "1000")[1]
    b = run(capsys, "gapcheck", "--quantizer", "kernel:4", "--seed", "3", "--samples", "1000")[1]
    assert a == b


# -- gradaudit -----------------------------------------------------------------------


def test_gradaudit_default_passes(capsys):
    code, out, _ = run(capsys, "gradaudit", "--quiet")
    assert code == 0
    lines = out.strip().splitlines()
    for beta in ("4", "8", "12", "24"):
        assert any(line.startswith(f"beta={beta} ") for line in lines)
    assert all("excluded_near_kinks=" in line for line in lines[:-1])
    assert int(lines[0].split("excluded_near_kinks=")[1].split()[0]) > 0
    assert lines[-1].startswith("PASS")


def test_gradaudit_coarse_step_fails(capsys):
    code, out, _ = run(capsys, "gradaudit", "--h", "1e-2")
    assert code == 1
    assert "FAIL" in out


def test_gradaudit_rejects_bad_step(capsys):
    assert run(capsys, "gradaudit", "--h", "0")[0] == 2


# -- train / eval / ablate --------------------------------------------------------------


def test_train_eval(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[train]\nepochs = 4\n[quant]\nweight_bits = 1\nactivation_bits = 1\n")
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--data.blobs_n", "200", "--out", str(tmp_path / "run"), "--quiet")
    assert code == 0
    assert (tmp_path / "run" / "checkpoint.daq").exists()
    metrics = list(csv.reader((tmp_path / "run" / "metrics.csv").open()))
    assert metrics[0] == ["epoch", "loss", "train_acc", "val_acc", "lr", "mean_gap", "mean_beta"]
    assert len(metrics) == 5
    code, out, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.daq"))
    assert code == 0
    rounding = out.split("rounding=")[1].split()[0]
    training = out.split("training_quantizer=")[1].split()[0]
    assert rounding == training
    assert "quantizer=daq" in out


def test_train_uses_env_output_dir(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("DAQ_OUTPUT_DIR", str(tmp_path / "env"))
    assert run(capsys, "train", "--train.epochs", "1", "--data.blobs_n", "100", "--quiet")[0] == 0
    assert (tmp_path / "env" / "metrics.csv").exists()


def test_train_missing_dataset(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--data.source", "idx", "--data.train_images", str(tmp_path / "x"), "--data.train_labels", str(tmp_path / "y"))
    assert code == 1
    assert err.startswith("error: DatasetError:") and "no such file" in err


def test_train_bad_config_value(capsys):
    code, _, err = run(capsys, "train", "--quant.weight_bits", "12")
    assert code == 1 and "ConfigError" in err


def test_eval_missing_checkpoint(capsys, tmp_path):
    bad = tmp_path / "x.daq"
    bad.write_bytes(b"nope")
    code, _, err = run(capsys, "eval", "--checkpoint", str(bad))
    assert code == 1 and "CheckpointError" in err


def test_ablate(capsys, tmp_path):
    code, out, _ = run(
        capsys, "ablate", "--quiet", "--variants", "daq,kernel:4", "--seeds", "0,1",
        "--train.epochs", "2", "--data.blobs_n", "200", "--quant.weight_bits", "1", "--out", str(tmp_path),
    )  # fmt: skip
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert [r["variant"] for r in rows] == ["daq", "kernel:4"]
    assert float(rows[0]["gap"]) == 0.0
    assert "table=" in out


def test_ablate_rejects_unknown_variant(capsys):
    assert run(capsys, "ablate", "--variants", "daq,bogus")[0] == 2


# -- argument handling -------------------------------------------------------------------


@pytest.mark.parametrize("cmd", [[], ["curves"], ["gapcheck"], ["gradaudit"], ["train"], ["eval"], ["ablate"]])
def test_help_exits_zero(cmd):
    with pytest.raises(SystemExit) as info:
        main([*cmd, "--help"])
    assert info.value.code == 0


@pytest.mark.parametrize("argv", [["curves", "--bogus"], ["frobnicate"], [], ["train", "--train.nope", "1"]])
def test_bad_arguments_exit_nonzero(argv, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code != 0
    assert "usage:" in capsys.readouterr().err


def test_console_script_module():
    proc = subprocess.run([sys.executable, "-m", "daq.cli", "gapcheck", "--expect-zero", "--samples", "1000"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
