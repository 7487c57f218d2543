"""Command-line entry point: ``daq {curves,gapcheck,gradaudit,train,eval,ablate}``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from daq.audit import THRESHOLD, run_audit
from daq.autodiff.checkpoint import CheckpointError
from daq.baselines import KindName, QuantizerKind, parse_kind, quantizer_gap, training_forward
from daq.core import QuantizerSpec, QuantizationError, staircase
from daq.harness.config import ConfigError, RunConfig, load_config
from daq.harness.data import DatasetError
from daq.harness.training import (
    EvalMode,
    TrainingDiverged,
    ablate,
    default_variants,
    evaluate,
    load_datasets,
    load_network,
    train,
    write_ablation_csv,
)

log = logging.getLogger("daq")

DEFAULT_CURVE_SAMPLES = 2001
GAP_ZERO_TOL = 1e-9
_NEEDS_BETA = {KindName.KERNEL, KindName.PLAIN, KindName.SIGMOID, KindName.STE_DASR, KindName.ANNEAL}


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--out", help="output file or directory (default: $DAQ_OUTPUT_DIR or ./runs)")
    p.add_argument("--quiet", action="store_true", help="only print results and errors")
    return p


def _add_overrides(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("config overrides")
    for key in RunConfig.keys():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)


def _overrides(args) -> dict[str, str]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="daq", description="Distance-aware quantizer tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curves", parents=[common], help="sample quantizer curves to CSV")
    p.add_argument("--bits", type=int, default=1)
    p.add_argument("--quantizers", default="daq,kernel,sigmoid", help="comma list, e.g. daq,kernel,plain:10")
    p.add_argument("--betas", type=_floats, default=[4.0, 24.0], help="temperatures for quantizers given without one")
    p.add_argument("--samples", type=int, default=DEFAULT_CURVE_SAMPLES)
    p.add_argument("--derivatives", action="store_true", help="add backward-pass derivative columns")

    p = sub.add_parser("gapcheck", parents=[common], help="mean |training-time output - rounding|")
    p.add_argument("--bits", type=int, default=1)
    p.add_argument("--quantizer", default="daq")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--expect-zero", action="store_true", help=f"exit 1 unless gap <= {GAP_ZERO_TOL:g}")

    p = sub.add_parser("gradaudit", parents=[common], help="finite-difference audit of the backward pass")
    p.add_argument("--bits", type=int, default=2)
    p.add_argument("--betas", type=_floats, default=[4.0, 8.0, 12.0, 24.0])
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--h", type=float, default=1e-6, help="finite-difference step")

    p = sub.add_parser("train", parents=[common], help="train a network")
    _add_overrides(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint with both test-time quantizers")
    p.add_argument("--checkpoint", required=True)
    _add_overrides(p)

    p = sub.add_parser("ablate", parents=[common], help="train quantizer variants and tabulate accuracies")
    p.add_argument("--variants", help="comma list of quantizers (default: the full ablation set)")
    p.add_argument("--seeds", type=_ints, help="comma list of seeds (default: --seed)")
    _add_overrides(p)
    return parser


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _spec(bits: int) -> QuantizerSpec:
    try:
        return QuantizerSpec(bits)
    except QuantizationError as exc:
        raise UsageError(str(exc)) from None


def _curve_kinds(names: str, betas: list[float]) -> list[QuantizerKind]:
    kinds = []
    for name in (n.strip() for n in names.split(",") if n.strip()):
        try:
            if ":" not in name and name.lower() in {k.value for k in _NEEDS_BETA}:
                for b in betas:
                    if name.lower() == KindName.ANNEAL.value:
                        kinds.append(QuantizerKind(KindName.KERNEL, beta=b))
                    else:
                        kinds.append(QuantizerKind(KindName(name.lower()), beta=b))
            else:
                kinds.append(parse_kind(name))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return kinds


def cmd_curves(args) -> int:
    if args.samples < 2:
        raise UsageError("--samples must be >= 2")
    spec = _spec(args.bits)
    kinds = _curve_kinds(args.quantizers, args.betas)
    x = np.linspace(0.0, spec.top, args.samples)
    columns: dict[str, np.ndarray] = {"x": x, "rounding": np.asarray(staircase(x, spec))}
    for kind in kinds:
        out = training_forward(kind, x, spec)
        label = str(kind)
        columns[label] = out.y
        if kind.name is KindName.DAQ:
            columns["beta_star"] = np.asarray(out.beta)
        if args.derivatives:
            columns[f"d_{label}"] = out.dy_dx
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in zip(*columns.values()):
        writer.writerow([repr(float(v)) for v in row])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue())
        log.info("wrote %d rows to %s", args.samples, args.out)
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_gapcheck(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    spec = _spec(args.bits)
    try:
        kind = parse_kind(args.quantizer)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    gap, worst = quantizer_gap(kind, spec, args.samples, seed=args.seed, return_max=True)
    print(f"quantizer={kind} bits={args.bits} samples={args.samples} gap={gap!r} max_deviation={worst!r}")
    if args.expect_zero:
        return 0 if gap <= GAP_ZERO_TOL else 1
    return 0


def cmd_gradaudit(args) -> int:
    if not args.h > 0:
        raise UsageError("--h must be positive")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if not args.betas or any(b <= 0 for b in args.betas):
        raise UsageError("--betas must be positive")
    report = run_audit(bits=_spec(args.bits).bits, betas=args.betas, n=args.samples, h=args.h, seed=args.seed)
    for line in report.lines:
        status = "ok" if line.passed() else "FAIL"
        print(f"{line.label:16s} worst_rel_err={line.worst:.3e} checked={line.checked} excluded_near_kinks={line.excluded} {status}")
    ok = report.passed()
    print(f"{'PASS' if ok else 'FAIL'}: worst relative error {report.worst:.3e} (threshold {THRESHOLD:g})")
    return 0 if ok else 1


def _config(args) -> RunConfig:
    overrides = _overrides(args)
    if args.seed and "train.seed" not in overrides:
        overrides["train.seed"] = args.seed
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg.set("output.dir", args.out)
    result = train(cfg)
    last = result.metrics[-1]
    print(f"epochs={len(result.metrics)} loss={last.loss:.6f} train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f} gap={last.mean_gap!r}")
    print(f"checkpoint={result.checkpoint_path}")
    print(f"metrics={result.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    net, cfg, _ = load_network(args.checkpoint)
    overrides = _overrides(args)
    if overrides:
        cfg.update(overrides).validate()
    _, val = load_datasets(cfg)
    acc_round = evaluate(net, val, EvalMode.ROUNDING)
    acc_train = evaluate(net, val, EvalMode.TRAINING)
    kinds = sorted({str(q.kind) for q in net.quantizers()}) or ["full-precision"]
    print(f"quantizer={','.join(kinds)} rounding={acc_round!r} training_quantizer={acc_train!r}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.variants:
        try:
            variants = [parse_kind(v) for v in args.variants.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        variants = default_variants()
    seeds = args.seeds if args.seeds else [args.seed]
    if cfg.full_precision:
        log.warning("ablating a full-precision config; set quant.weight_bits/activation_bits to quantize")
    rows = ablate(cfg, variants, seeds)
    out_dir = Path(args.out) if args.out else cfg.output_dir()
    path = write_ablation_csv(rows, out_dir / "ablation.csv")
    for row in rows:
        d = row.as_dict()
        print(
            f"{d['variant']:14s} rounding={float(d['acc_rounding_mean']):.4f}±{float(d['acc_rounding_std']):.4f} "
            f"training={float(d['acc_training_mean']):.4f}±{float(d['acc_training_std']):.4f} "
            f"gap={float(d['gap']):.4g} ms/iter={float(d['ms_per_iter']):.2f}"
        )
    print(f"table={path}")
    return 0


COMMANDS = {
    "curves": cmd_curves,
    "gapcheck": cmd_gapcheck,
    "gradaudit": cmd_gradaudit,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"daq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DatasetError, CheckpointError, TrainingDiverged, QuantizationError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
