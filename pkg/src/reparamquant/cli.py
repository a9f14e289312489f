"""``reparamquant`` command line: train, merge, quantize, diagnose, eval.

Exit status is 0 only when every requested artifact was written; 2 flags a
bad configuration or argument, 1 any other failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint, quant
from .config import ConfigError, DataConfig, RunConfig, apply_overrides, get_preset, load_file
from .data import Dataset, DatasetError, SyntheticParams, load_cifar10, make_synthetic
from .diagnostics import identity_ratios, outlier_report, weight_heatmap, write_heatmap_csv
from .pipeline import (
    RunReport,
    TrainingDiverged,
    calibration_batches,
    evaluate,
    ptq_cluster,
    ptq_uniform,
    quant_key,
    train_clusterqat,
    train_oabn,
    train_uniform_qat,
)
from .repvgg import DeployedNet, RepVggNet, convert_to_vgg

logger = logging.getLogger("reparamquant")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
INT8 = 8


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration and data
# ---------------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    """Preset or config file, then command-line overrides."""
    if args.config is not None:
        cfg = load_file(args.config)
    elif args.preset is not None:
        cfg = get_preset(args.preset)
    else:
        cfg = get_preset("desk-synthetic-oabn")
    flags = {
        "seed": getattr(args, "seed", None),
        "k": getattr(args, "k", None),
        "weight_bits": getattr(args, "bits_w", None),
        "act_bits": getattr(args, "bits_a", None),
        "qat_scheme": getattr(args, "scheme", None),
        "out_dir": getattr(args, "out", None),
    }
    return apply_overrides(cfg, {k: str(v) for k, v in flags.items() if v is not None})


def load_dataset(dc: DataConfig) -> Dataset:
    if dc.kind == "synthetic":
        params = SyntheticParams(classes=dc.classes, samples=dc.samples, image_size=dc.image_size, noise=dc.noise, seed=dc.seed)
        return make_synthetic(params)
    if dc.kind in ("cifar10", "cifar10_subset"):
        return load_cifar10(dc.path, train_limit=dc.train_limit, test_limit=dc.test_limit)
    raise DatasetError(f"no loader for dataset {dc.kind!r}; this preset documents a configuration only")


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _ckpt_meta(cfg: RunConfig, phase: str, epoch: int) -> dict:
    return {"phase": phase, "epoch": epoch, "seed": cfg.train.seed, "k": cfg.train.k, "preset": cfg.preset}


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def run_training(cfg: RunConfig, data: Dataset, out: Path) -> RunReport:
    """All configured phases; a checkpoint at every phase boundary."""
    tc = cfg.train
    net = RepVggNet.create(cfg.net, seed=tc.seed)
    report = RunReport(meta={"preset": cfg.preset, "seed": tc.seed, "k": tc.k, "dataset": cfg.data.kind})
    checkpoint.save(out / "ckpt_init.rpqw", net, _ckpt_meta(cfg, "init", 0))
    if tc.epochs_oabn == 0 and tc.epochs_cluster == 0:
        return report

    if tc.epochs_oabn > 0:
        if tc.k is not None and 0 < tc.oabn_warmup < tc.epochs_oabn:
            net, r = train_oabn(net, data, tc, 0, tc.oabn_warmup)
            report.merge(r)
            checkpoint.save(out / "ckpt_fp32.rpqw", net, _ckpt_meta(cfg, "fp32", tc.oabn_warmup))
            net, r = train_oabn(net, data, tc, tc.oabn_warmup)
            report.merge(r)
            checkpoint.save(out / "ckpt_oabn.rpqw", net, _ckpt_meta(cfg, "oabn", tc.epochs_oabn))
        else:
            net, r = train_oabn(net, data, tc)
            report.merge(r)
            phase = "oabn" if tc.k is not None else "fp32"
            checkpoint.save(out / f"ckpt_{phase}.rpqw", net, _ckpt_meta(cfg, phase, tc.epochs_oabn))

    # FP32 and INT8 accuracy of the pretrained net
    report.fp32_accuracy = evaluate(net, data.x_test, data.y_test)
    calib = calibration_batches(data, tc)
    dq, acc = ptq_uniform(net, INT8, INT8, calib, data.x_test, data.y_test, tc.act_literal_clamp)
    report.quantized[quant_key("uniform", INT8, INT8)] = {"accuracy": acc, "state_size": quant.state_size(dq)}
    report.state_size = quant.state_size(dq)
    if (tc.weight_bits, tc.act_bits) != (INT8, INT8):
        ptq = ptq_cluster if cfg.qat_scheme == "cluster" else ptq_uniform
        dq_b, acc_b = ptq(net, tc.weight_bits, tc.act_bits, calib, data.x_test, data.y_test, tc.act_literal_clamp)
        report.quantized[quant_key(cfg.qat_scheme, tc.weight_bits, tc.act_bits)] = {
            "accuracy": acc_b, "state_size": quant.state_size(dq_b),
        }
    report.outliers = outlier_report(net).summary()

    if tc.epochs_cluster > 0:
        train_fn = train_clusterqat if cfg.qat_scheme == "cluster" else train_uniform_qat
        net, dq_qat, r = train_fn(net, data, tc)
        report.merge(r)
        report.cluster_sse = r.cluster_sse
        checkpoint.save(out / "ckpt_qat.rpqw", net, _ckpt_meta(cfg, f"{cfg.qat_scheme}_qat", tc.epochs_oabn + tc.epochs_cluster))
        checkpoint.save(out / "deployed_qat.rpqw", dq_qat, _ckpt_meta(cfg, f"{cfg.qat_scheme}_qat", tc.epochs_oabn + tc.epochs_cluster))
    report.validate()
    return report


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = load_dataset(cfg.data)
    out = _out_dir(cfg)
    _write_text(out / "config.txt", cfg.to_text())
    report = run_training(cfg, data, out)
    _write_text(out / "report.txt", report.to_text())
    print(f"wrote {out / 'report.txt'}")
    if report.fp32_accuracy is not None:
        print(f"fp32_accuracy={report.fp32_accuracy!r}")
        print(f"int8_accuracy={report.quantized[quant_key('uniform', INT8, INT8)]['accuracy']!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# merge / quantize / diagnose / eval
# ---------------------------------------------------------------------------

def _load(path) -> tuple:
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise CliError(f"no such checkpoint: {path}") from None


def _out_path(args, default_dir: str, name: str) -> Path:
    out = Path(args.out if args.out is not None else default_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def cmd_merge(args) -> int:
    model, meta = _load(args.checkpoint)
    if isinstance(model, DeployedNet):
        raise CliError(f"{args.checkpoint} is already a deployed checkpoint; merging it again is not allowed")
    dnet = convert_to_vgg(model)
    ids = identity_ratios(model)
    dnet.meta["identity_ratios"] = [None if r is None else [float(v) for v in r] for r in ids]
    dst = _out_path(args, str(Path(args.checkpoint).parent), "deployed.rpqw")
    provenance = {"merged_from": str(args.checkpoint), "source_phase": meta.get("phase"), "source_epoch": meta.get("epoch")}
    checkpoint.save(dst, dnet, {**{k: meta.get(k) for k in ("seed", "k", "preset")}, **provenance})
    print(f"wrote {dst}")
    return EXIT_OK


def _as_deployed(model) -> DeployedNet:
    return convert_to_vgg(model) if isinstance(model, RepVggNet) else model


def quantize_report_text(dq: DeployedNet, scheme: str, bits: int, act_bits: int, accuracy: float) -> str:
    lines = [
        f"scheme={scheme}", f"weight_bits={bits}", f"act_bits={act_bits}",
        f"accuracy={accuracy!r}", f"state_size={quant.state_size(dq)}",
    ]
    for i, q in enumerate(dq.weight_quant):
        p = f"layer{i}"
        lines.append(f"{p}.distinct={q.distinct_values()}")
        if q.spec.scheme == "cluster":
            lines.append(f"{p}.points={','.join(repr(float(v)) for v in q.spec.points)}")
        else:
            lines.append(f"{p}.scale={q.spec.scale!r}")
        r = dq.act_ranges[i]
        if r is not None:
            lines.append(f"{p}.act_range={float(r[0])!r},{float(r[1])!r}")
    return "\n".join(lines) + "\n"


def cmd_quantize(args) -> int:
    if args.bits_w is not None:
        quant.check_bits(args.bits_w)
    if args.bits_a is not None and args.bits_a != 32:
        quant.check_bits(args.bits_a)
    model, meta = _load(args.checkpoint)
    dnet = _as_deployed(model)
    if any(q is not None for q in dnet.weight_quant):
        raise CliError(f"{args.checkpoint} is already quantized")
    cfg = resolve_config(argparse.Namespace(config=args.config, preset=args.preset, out=None))
    bits = args.bits_w if args.bits_w is not None else cfg.train.weight_bits
    abits = args.bits_a if args.bits_a is not None else cfg.train.act_bits
    scheme = args.scheme or "uniform"
    data = load_dataset(cfg.data)
    calib = calibration_batches(data, cfg.train)
    ptq = ptq_cluster if scheme == "cluster" else ptq_uniform
    dq, acc = ptq(dnet, bits, abits, calib, data.x_test, data.y_test, cfg.train.act_literal_clamp)
    dst = _out_path(args, str(Path(args.checkpoint).parent), "quantized.rpqw")
    checkpoint.save(dst, dq, {**{k: meta.get(k) for k in ("seed", "k", "preset")}, "quantized_from": str(args.checkpoint)})
    text = quantize_report_text(dq, scheme, bits, abits, acc)
    _write_text(dst.with_name("quantize_report.txt"), text)
    print(text, end="")
    return EXIT_OK


def _channel_ranges(kernel: np.ndarray, channels: Optional[int]) -> tuple:
    n = min(kernel.shape[0], kernel.shape[1]) if channels is None else channels
    return (0, min(n, kernel.shape[0])), (0, min(n, kernel.shape[1]))


def cmd_diagnose(args) -> int:
    model, _ = _load(args.checkpoint)
    if isinstance(model, RepVggNet):
        report = outlier_report(model)
        dnet = convert_to_vgg(model)
    else:
        dnet = model
        ids = dnet.meta.get("identity_ratios")
        report = outlier_report(dnet, ids)
    out = Path(args.out if args.out is not None else Path(args.checkpoint).parent / "diagnose")
    out.mkdir(parents=True, exist_ok=True)
    layers = range(len(dnet.layers)) if args.layers is None else [int(v) for v in args.layers.split(",")]
    for i in layers:
        if not 0 <= i < len(dnet.layers):
            raise CliError(f"layer {i} out of range (net has {len(dnet.layers)} merged layers)")
        k = dnet.layer_kernel(i)
        o_rng, i_rng = _channel_ranges(k, args.channels)
        write_heatmap_csv(weight_heatmap(k, o_rng, i_rng), out / f"heatmap_layer{i}.csv")
    text = "\n".join(f"{k}={v!r}" for k, v in report.summary().items()) + "\n"
    _write_text(out / "outliers.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = _load(args.checkpoint)
    cfg = resolve_config(argparse.Namespace(config=args.config, preset=args.preset, out=None))
    data = load_dataset(cfg.data)
    acc = evaluate(model, data.x_test, data.y_test)
    print(f"accuracy={acc!r}")
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_text(Path(args.out) / "eval.txt", f"checkpoint={args.checkpoint}\naccuracy={acc!r}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_source(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", metavar="PATH", help="key = value configuration document")
    g.add_argument("--preset", metavar="NAME", help="named preset (default desk-synthetic-oabn)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reparamquant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the configured training phases")
    _add_source(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", help="OABN threshold, or 'none'")
    p.add_argument("--bits-w", type=int)
    p.add_argument("--bits-a", type=int)
    p.add_argument("--scheme", choices=("uniform", "cluster"), help="QAT weight scheme")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="convert a train-structure checkpoint to the deploy structure")
    p.add_argument("checkpoint")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("quantize", help="post-training quantization of a checkpoint")
    p.add_argument("checkpoint")
    _add_source(p)
    p.add_argument("--scheme", choices=("uniform", "cluster"))
    p.add_argument("--bits-w", type=int)
    p.add_argument("--bits-a", type=int)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("diagnose", help="outlier statistics and weight heatmaps")
    p.add_argument("checkpoint")
    p.add_argument("--layers", help="comma-separated merged layer indices (default all)")
    p.add_argument("--channels", type=int, help="heatmap channel count (default all)")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("checkpoint")
    _add_source(p)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CliError, DatasetError, checkpoint.CheckpointError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
