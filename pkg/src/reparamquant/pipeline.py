"""Training and evaluation phases.

Phase order per run: plain FP32 warmup, OABN training, then (optionally)
quantization-aware fine-tuning with uniform or clustered merged weights.
OABN and the QAT phases are never active together.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import ops, quant
from .data import Dataset, iterate_batches
from .diagnostics import outlier_report
from .repvgg import (
    DeployedNet,
    RepVggNet,
    bake_oabn,
    convert_to_vgg,
    deployed_forward,
    net_forward,
    set_oabn,
)
from .tensor import Tensor, backward, get_tape, no_grad

logger = logging.getLogger(__name__)

FP32_BITS = 32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs_oabn: int = 30
    epochs_cluster: int = 0
    oabn_warmup: int = 20
    k: Optional[float] = None
    oabn_bound: str = "var"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    lr_t_max: int = 50
    lr_step: int = 30
    qat_lr_scale: float = 0.01
    weight_bits: int = 8
    act_bits: int = 8
    act_literal_clamp: bool = False
    calibration_batches: int = 4
    seed: int = 0

    def validate(self) -> None:
        for name in ("epochs_oabn", "epochs_cluster", "oabn_warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.oabn_warmup > self.epochs_oabn:
            raise ValueError(f"oabn_warmup ({self.oabn_warmup}) exceeds epochs_oabn ({self.epochs_oabn})")
        if self.k is not None and not self.k > 0:
            raise ValueError(f"OABN threshold k must be positive, got {self.k}")
        if self.batch_size < 1 or self.calibration_batches < 1:
            raise ValueError("batch_size and calibration_batches must be positive")
        if self.lr_schedule not in ("cosine", "step"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        for name in ("weight_bits", "act_bits"):
            b = getattr(self, name)
            if b != FP32_BITS:
                quant.check_bits(b)

    @property
    def schedule(self) -> "LrSchedule":
        arg = self.lr_t_max if self.lr_schedule == "cosine" else self.lr_step
        return LrSchedule(self.lr_schedule, self.lr, arg)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    lr0: float
    period: int
    decay: float = 0.1


def lr_schedule(desc: LrSchedule, epoch: int) -> float:
    """Cosine annealing (restarting every ``period`` epochs) or step decay."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if desc.kind == "cosine":
        t = epoch % desc.period
        return desc.lr0 * (1 + math.cos(math.pi * t / desc.period)) / 2
    if desc.kind == "step":
        return desc.lr0 * desc.decay ** (epoch // desc.period)
    raise ValueError(f"unknown lr schedule {desc.kind!r}")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("phase", "epoch", "lr", "loss", "train_acc", "quant_loss", "quant_acc")


@dataclass
class RunReport:
    epochs: list = field(default_factory=list)
    fp32_accuracy: Optional[float] = None
    quantized: dict = field(default_factory=dict)
    state_size: Optional[int] = None
    outliers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    # per mini-batch, per layer squared assignment error (ClusterQAT only)
    cluster_sse: list = field(default_factory=list)

    def log_epoch(self, phase: str, epoch: int, lr: float, loss: float, acc: float,
                  quant_loss: Optional[float] = None, quant_acc: Optional[float] = None) -> None:
        self.epochs.append({
            "phase": phase, "epoch": epoch, "lr": lr, "loss": loss, "train_acc": acc,
            "quant_loss": quant_loss, "quant_acc": quant_acc,
        })

    def merge(self, other: "RunReport") -> None:
        self.epochs += other.epochs
        self.quantized.update(other.quantized)
        self.meta.update(other.meta)
        for name in ("fp32_accuracy", "state_size"):
            if getattr(other, name) is not None:
                setattr(self, name, getattr(other, name))
        if other.outliers:
            self.outliers = other.outliers

    def key_values(self) -> list[tuple[str, object]]:
        kv: list = [("fp32_accuracy", self.fp32_accuracy), ("state_size", self.state_size)]
        for key in sorted(self.quantized):
            kv += [(f"quant.{key}.{f}", v) for f, v in sorted(self.quantized[key].items())]
        kv += [(f"outliers.{k}", v) for k, v in sorted(self.outliers.items())]
        kv += [(f"meta.{k}", v) for k, v in sorted(self.meta.items())]
        if self.cluster_sse:
            kv += [(f"cluster_sse.final.layer{i}", v) for i, v in enumerate(self.cluster_sse[-1])]
        return kv

    def to_text(self) -> str:
        """``key=value`` lines, a blank line, then the per-epoch CSV table."""
        lines = [f"{k}={_fmt_value(v)}" for k, v in self.key_values()]
        lines += ["", ",".join(METRIC_COLUMNS)]
        lines += [",".join(_fmt_value(e[c]) for c in METRIC_COLUMNS) for e in self.epochs]
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        accs = [self.fp32_accuracy] + [q["accuracy"] for q in self.quantized.values()]
        accs += [e["train_acc"] for e in self.epochs] + [e["quant_acc"] for e in self.epochs]
        for a in accs:
            if a is not None and not 0.0 <= a <= 100.0:
                raise ValueError(f"accuracy {a} outside [0, 100]")


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_value(x) for x in v)
    return str(v)


def parse_report_text(text: str) -> tuple[dict, list[dict]]:
    """Inverse of :meth:`RunReport.to_text` with every value left as a string."""
    head, _, table = text.partition("\n\n")
    kv = dict(line.split("=", 1) for line in head.splitlines() if line)
    rows = table.splitlines()
    cols = rows[0].split(",") if rows else []
    return kv, [dict(zip(cols, r.split(","))) for r in rows[1:]]


def quant_key(scheme: str, weight_bits: int, act_bits: int) -> str:
    return f"{scheme}.w{weight_bits}a{act_bits}"


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_logits(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits of a train-structure net (eval mode) or a deployed net."""
    outs = []
    for start in range(0, len(x), batch_size):
        xb = x[start : start + batch_size]
        if isinstance(model, DeployedNet):
            outs.append(deployed_forward(model, xb))
        elif isinstance(model, RepVggNet):
            with no_grad():
                outs.append(net_forward(model, Tensor(xb), "eval").data)
        else:
            outs.append(np.asarray(model(xb)))
    return np.concatenate(outs)


def evaluate(model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent; argmax ties resolve to the lowest class."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict_logits(model, x, batch_size).argmax(axis=1)
    return 100.0 * float(np.mean(pred == np.asarray(y)))


def calibration_batches(data: Dataset, cfg: TrainConfig) -> list[np.ndarray]:
    return [xb for xb, _ in iterate_batches(data.x_train, data.y_train, cfg.batch_size)][: cfg.calibration_batches]


# ---------------------------------------------------------------------------
# weight quantization of a deployed net
# ---------------------------------------------------------------------------

def quantize_uniform(dnet: DeployedNet, weight_bits: int) -> DeployedNet:
    out = dnet.copy()
    if weight_bits == FP32_BITS:
        return out
    out.weight_quant = [quant.quantize_weights_uniform(l.kernel, weight_bits, l.bias) for l in dnet.layers]
    return out


def quantize_cluster(dnet: DeployedNet, bits: int, points: Optional[list] = None, iters: int = 100) -> DeployedNet:
    """Clustered weights; ``points`` per layer, or k-means on frozen weights."""
    quant.check_bits(bits)
    out = dnet.copy()
    if points is None:
        points = [quant.kmeans_points(l.kernel, bits, iters) for l in dnet.layers]
    out.weight_quant = [quant.cluster_quantized_layer(l.kernel, p, l.bias, bits) for l, p in zip(dnet.layers, points)]
    return out


def with_act_quant(dnet: DeployedNet, act_bits: int, calib: list, literal_clamp: bool = False) -> DeployedNet:
    out = dnet.copy()
    if act_bits == FP32_BITS:
        out.act_bits = None
        return out
    out.act_ranges = quant.calibrate_activations(dnet, calib)
    out.act_bits = act_bits
    out.act_literal_clamp = literal_clamp
    return out


def ptq_uniform(
    net,
    weight_bits: int,
    act_bits: int,
    calib: list,
    x_eval: np.ndarray,
    y_eval: np.ndarray,
    literal_clamp: bool = False,
) -> tuple[DeployedNet, float]:
    """Merge, quantize merged weights and activations, and score the result.

    ``32`` for either bit-width leaves that side in FP32.
    """
    dnet = net if isinstance(net, DeployedNet) else convert_to_vgg(net)
    dq = with_act_quant(quantize_uniform(dnet, weight_bits), act_bits, calib, literal_clamp)
    dq.meta.update({"scheme": "uniform", "weight_bits": weight_bits, "act_bits": act_bits})
    return dq, evaluate(dq, x_eval, y_eval)


def ptq_cluster(net, bits: int, act_bits: int, calib: list, x_eval, y_eval, literal_clamp: bool = False):
    dnet = net if isinstance(net, DeployedNet) else convert_to_vgg(net)
    dq = with_act_quant(quantize_cluster(dnet, bits), act_bits, calib, literal_clamp)
    dq.meta.update({"scheme": "cluster", "weight_bits": bits, "act_bits": act_bits})
    return dq, evaluate(dq, x_eval, y_eval)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def make_optimizer(net: RepVggNet, cfg: TrainConfig) -> ops.SGD:
    return ops.SGD(net.decay_parameters(), net.plain_parameters(), cfg.momentum, cfg.weight_decay)


def train_step(net: RepVggNet, xb: np.ndarray, yb: np.ndarray, oabn_active: Optional[bool] = None) -> tuple[float, int]:
    """Full-precision three-branch forward and backward; grads left on the params."""
    tape = get_tape()
    tape.clear()
    logits = net_forward(net, Tensor(xb), "train", oabn_active)
    loss = ops.softmax_cross_entropy(logits, yb)
    backward(loss, tape)
    correct = int(np.sum(logits.data.argmax(axis=1) == yb))
    return float(loss.data), correct


class _DivergenceGuard:
    def __init__(self, limit: int = 3):
        self.limit = limit
        self.streak = 0

    def ok(self, loss: float, phase: str, epoch: int, batch: int) -> bool:
        if math.isfinite(loss):
            self.streak = 0
            return True
        self.streak += 1
        if self.streak >= self.limit:
            raise TrainingDiverged(f"{phase}: non-finite loss for {self.streak} consecutive batches (epoch {epoch}, batch {batch})")
        return False


def _drop_grads(net: RepVggNet) -> None:
    for p in net.parameters():
        p.grad = None


def train_oabn(net: RepVggNet, data: Dataset, cfg: TrainConfig, start_epoch: int = 0, epochs=None) -> tuple[RepVggNet, RunReport]:
    """FP32 training; from ``cfg.oabn_warmup`` on, the identity BN runs with OABN.

    Epochs ``[start_epoch, epochs)`` are run (``epochs`` defaults to
    ``cfg.epochs_oabn``). When the last epoch ran with OABN the clipped gamma
    is written back before returning.
    """
    cfg.validate()
    end = cfg.epochs_oabn if epochs is None else epochs
    report = RunReport(meta={"seed": cfg.seed, "k": cfg.k})
    opt = make_optimizer(net, cfg)
    if "velocities" in net.meta:
        opt.velocities = net.meta.pop("velocities")
    guard = _DivergenceGuard()
    oabn_on = False
    for epoch in range(start_epoch, end):
        oabn_on = cfg.k is not None and epoch >= cfg.oabn_warmup
        set_oabn(net, cfg.k if oabn_on else None, cfg.oabn_bound)
        lr = lr_schedule(cfg.schedule, epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        total, correct, seen = 0.0, 0, 0
        for b, (xb, yb) in enumerate(iterate_batches(data.x_train, data.y_train, cfg.batch_size, rng)):
            loss, c = train_step(net, xb, yb)
            if not guard.ok(loss, "oabn" if oabn_on else "fp32", epoch, b):
                _drop_grads(net)
                continue
            opt.step(lr)
            total += loss * len(xb)
            correct += c
            seen += len(xb)
        report.log_epoch("oabn" if oabn_on else "fp32", epoch, lr, total / max(seen, 1), 100.0 * correct / max(seen, 1))
        logger.info("epoch %d lr %.4g loss %.4f acc %.2f", epoch, lr, total / max(seen, 1), 100.0 * correct / max(seen, 1))
    if oabn_on:
        bake_oabn(net)
        net.meta["oabn_k"] = cfg.k
        net.meta["oabn_bound"] = cfg.oabn_bound
    set_oabn(net, None)
    if end < cfg.epochs_oabn:
        # a later call resumes this run; keep its momentum
        net.meta["velocities"] = opt.velocities
    net.meta["epoch"] = max(end, net.meta.get("epoch", 0))
    return net, report


def _quantized_forward_stats(dq: DeployedNet, xb: np.ndarray, yb: np.ndarray) -> tuple[float, int]:
    logits = deployed_forward(dq, xb, dynamic_acts=True)
    with no_grad():
        loss = ops.softmax_cross_entropy(Tensor(logits), yb)
    return float(loss.data), int(np.sum(logits.argmax(axis=1) == yb))


def _finetune(net: RepVggNet, data: Dataset, cfg: TrainConfig, phase: str, quantize_batch, on_epoch_start=None) -> RunReport:
    """Shared QAT loop: quantized deploy forward for the reported loss, FP
    three-branch forward/backward for the update (straight-through)."""
    report = RunReport(meta={"seed": cfg.seed, "bn_stats_during_qat": "updating"})
    opt = make_optimizer(net, cfg)
    lr = cfg.lr * cfg.qat_lr_scale
    guard = _DivergenceGuard()
    set_oabn(net, None)
    for epoch in range(cfg.epochs_cluster):
        if on_epoch_start is not None:
            on_epoch_start(epoch)
        rng = np.random.default_rng([cfg.seed, 10_000 + epoch])
        tot_q, cor_q, tot, cor, seen = 0.0, 0, 0.0, 0, 0
        for b, (xb, yb) in enumerate(iterate_batches(data.x_train, data.y_train, cfg.batch_size, rng)):
            dq = quantize_batch(convert_to_vgg(net))
            dq.act_bits = None if cfg.act_bits == FP32_BITS else cfg.act_bits
            dq.act_literal_clamp = cfg.act_literal_clamp
            q_loss, q_cor = _quantized_forward_stats(dq, xb, yb)
            loss, c = train_step(net, xb, yb, oabn_active=False)
            if not guard.ok(loss, phase, epoch, b):
                _drop_grads(net)
                continue
            opt.step(lr)
            tot_q += q_loss * len(xb)
            cor_q += q_cor
            tot += loss * len(xb)
            cor += c
            seen += len(xb)
        n = max(seen, 1)
        report.log_epoch(phase, epoch, lr, tot / n, 100.0 * cor / n, tot_q / n, 100.0 * cor_q / n)
    return report


def train_uniform_qat(net: RepVggNet, data: Dataset, cfg: TrainConfig) -> tuple[RepVggNet, Optional[DeployedNet], RunReport]:
    """QAT on merged weights with the uniform symmetric weight quantizer."""
    cfg.validate()
    report = _finetune(net, data, cfg, "uniform_qat", lambda d: quantize_uniform(d, cfg.weight_bits))
    if cfg.epochs_cluster == 0:
        return net, None, report
    dq, acc = ptq_uniform(net, cfg.weight_bits, cfg.act_bits, calibration_batches(data, cfg),
                          data.x_test, data.y_test, cfg.act_literal_clamp)
    report.quantized[quant_key("uniform_qat", cfg.weight_bits, cfg.act_bits)] = {"accuracy": acc, "state_size": quant.state_size(dq)}
    report.state_size = quant.state_size(dq)
    return net, dq, report


def train_clusterqat(net: RepVggNet, data: Dataset, cfg: TrainConfig) -> tuple[RepVggNet, Optional[DeployedNet], RunReport]:
    """ClusterQAT: per epoch, linspace points over the merged weights; per
    mini-batch, nearest-point assignment, one centroid step, quantized forward
    and a full-precision update. Returns the net quantized to the final points.
    """
    cfg.validate()
    bits = cfg.weight_bits
    quant.check_bits(bits)
    points: list = []
    sse_log: list = []

    def on_epoch_start(epoch: int) -> None:
        dnet = convert_to_vgg(net)
        points[:] = [quant.init_cluster_points(l.kernel, bits) for l in dnet.layers]

    def quantize_batch(dnet: DeployedNet) -> DeployedNet:
        out = dnet.copy()
        wq = []
        sse = []
        for i, l in enumerate(dnet.layers):
            assigned, idx = quant.assign_nearest(l.kernel, points[i])
            wq.append(quant.cluster_quantized_layer(l.kernel, points[i], l.bias, bits))
            d = l.kernel.astype(np.float64) - assigned
            sse.append(float(np.sum(d * d)))
            points[i] = quant.lloyd_update(l.kernel, idx, points[i])
        sse_log.append(sse)
        out.weight_quant = wq
        return out

    report = _finetune(net, data, cfg, "cluster_qat", quantize_batch, on_epoch_start)
    report.cluster_sse = sse_log
    if cfg.epochs_cluster == 0:
        return net, None, report
    dnet = convert_to_vgg(net)
    dq = quantize_cluster(dnet, bits, points=[p.copy() for p in points])
    dq = with_act_quant(dq, cfg.act_bits, calibration_batches(data, cfg), cfg.act_literal_clamp)
    dq.meta.update({"scheme": "cluster", "weight_bits": bits, "act_bits": cfg.act_bits})
    acc = evaluate(dq, data.x_test, data.y_test)
    report.quantized[quant_key("cluster_qat", bits, cfg.act_bits)] = {"accuracy": acc, "state_size": quant.state_size(dq)}
    report.state_size = quant.state_size(dq)
    return net, dq, report


def snapshot_outliers(net: RepVggNet) -> dict:
    return outlier_report(net).summary()
