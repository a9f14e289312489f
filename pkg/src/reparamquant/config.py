"""Run configuration documents and named presets.

A document is ``key = value`` lines; ``#`` starts a comment. A ``preset``
line, wherever it appears, selects the base values and the remaining keys
override them. Unknown keys are rejected before anything runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .pipeline import TrainConfig
from .repvgg import NetConfig

DATASET_KINDS = ("synthetic", "cifar10", "cifar10_subset", "imagenet")
QAT_SCHEMES = ("cluster", "uniform")


class ConfigError(ValueError):
    """Bad key or value in a configuration document."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    path: Optional[str] = None
    classes: int = 10
    samples: int = 3000
    image_size: int = 16
    noise: float = 5.0
    seed: int = 0
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None


@dataclass
class RunConfig:
    preset: Optional[str] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    qat_scheme: str = "cluster"
    out_dir: str = "runs/default"

    def validate(self) -> None:
        self.train.validate()
        if self.data.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset {self.data.kind!r}", "dataset")
        if self.qat_scheme not in QAT_SCHEMES:
            raise ConfigError(f"unknown qat_scheme {self.qat_scheme!r}", "qat_scheme")
        if self.data.kind == "synthetic" and self.data.classes != self.net.num_classes:
            raise ConfigError(f"synth_classes={self.data.classes} but num_classes={self.net.num_classes}", "num_classes")

    def to_text(self) -> str:
        return format_document(self)


# key -> (section, attribute, parser)
def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _opt_int(v: str) -> Optional[int]:
    return None if v.lower() == "none" else int(v)


def _opt_str(v: str) -> Optional[str]:
    return None if v.lower() == "none" else v


def _opt_k(v: str) -> Optional[float]:
    """``none`` disables OABN; ``inf`` keeps it on with a band that never binds."""
    if v.lower() == "none":
        return None
    return math.inf if v.lower() in ("inf", "+inf") else float(v)


def _bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(p) for p in v.split(",") if p.strip())


def _str(v: str) -> str:
    return v


_TRAIN_PARSERS = {
    "batch_size": _int, "epochs_oabn": _int, "epochs_cluster": _int, "oabn_warmup": _int, "k": _opt_k,
    "oabn_bound": _str, "lr": _float, "momentum": _float, "weight_decay": _float, "lr_schedule": _str,
    "lr_t_max": _int, "lr_step": _int, "qat_lr_scale": _float, "weight_bits": _int, "act_bits": _int,
    "act_literal_clamp": _bool, "calibration_batches": _int, "seed": _int,
}
assert set(_TRAIN_PARSERS) == set(TrainConfig.field_names())

KEYS = {
    **{name: ("train", name, p) for name, p in _TRAIN_PARSERS.items()},
    "depths": ("net", "depths", _ints),
    "widths": ("net", "widths", _ints),
    "strides": ("net", "strides", _ints),
    "stem_stride": ("net", "stem_stride", _int),
    "num_classes": ("net", "num_classes", _int),
    "dataset": ("data", "kind", _str),
    "data_path": ("data", "path", _opt_str),
    "synth_classes": ("data", "classes", _int),
    "synth_samples": ("data", "samples", _int),
    "synth_image_size": ("data", "image_size", _int),
    "synth_noise": ("data", "noise", _float),
    "synth_seed": ("data", "seed", _int),
    "train_limit": ("data", "train_limit", _opt_int),
    "test_limit": ("data", "test_limit", _opt_int),
    "qat_scheme": (None, "qat_scheme", _str),
    "out_dir": (None, "out_dir", _str),
}


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    """Return a copy of ``cfg`` with ``key -> raw string`` overrides applied."""
    train, net, data = replace(cfg.train), cfg.net, cfg.data
    top = {"qat_scheme": cfg.qat_scheme, "out_dir": cfg.out_dir}
    net_kw, data_kw = {}, {}
    for key, raw in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}", key)
        section, attr, parse = KEYS[key]
        try:
            val = parse(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key) from None
        if section == "train":
            setattr(train, attr, val)
        elif section == "net":
            net_kw[attr] = val
        elif section == "data":
            data_kw[attr] = val
        else:
            top[attr] = val
    try:
        net = replace(net, **net_kw)
    except ValueError as exc:
        raise ConfigError(str(exc), next(iter(net_kw), None)) from None
    data = replace(data, **data_kw)
    out = RunConfig(cfg.preset, train, net, data, top["qat_scheme"], top["out_dir"])
    try:
        out.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        # TrainConfig errors name the field first
        raise ConfigError(str(exc), str(exc).split(" ", 1)[0]) from None
    return out


def parse_document(text: str, source: str = "<config>") -> tuple[Optional[str], dict]:
    """Split a document into its preset name and ordered raw key/values."""
    preset = None
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key in values or (key == "preset" and preset is not None):
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key)
        if key == "preset":
            preset = val
        elif key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}", key)
        else:
            values[key] = val
    return preset, values


def load_document(text: str, source: str = "<config>") -> RunConfig:
    preset, values = parse_document(text, source)
    base = get_preset(preset) if preset is not None else RunConfig()
    return apply_overrides(base, values)


def load_file(path) -> RunConfig:
    path = Path(path)
    return load_document(path.read_text(encoding="utf-8"), str(path))


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_document(cfg: RunConfig) -> str:
    """Canonical text form; loading it gives back an equal config."""
    lines = []
    if cfg.preset is not None:
        lines.append(f"preset = {cfg.preset}")
    for key, (section, attr, _) in KEYS.items():
        obj = {"train": cfg.train, "net": cfg.net, "data": cfg.data}.get(section, cfg)
        lines.append(f"{key} = {_fmt(getattr(obj, attr))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _desk(k: Optional[float]) -> RunConfig:
    return RunConfig(
        preset=None,
        train=TrainConfig(
            batch_size=64, epochs_oabn=30, epochs_cluster=0, oabn_warmup=7, k=k, lr=0.1, momentum=0.9,
            weight_decay=2e-3, lr_schedule="cosine", lr_t_max=30, weight_bits=8, act_bits=8,
        ),
        net=NetConfig((1, 1, 2, 1), (16, 16, 16, 16), (1, 1, 2, 2), 3, 10),
        data=DataConfig("synthetic", classes=10, samples=3000, image_size=16, noise=5.0),
        qat_scheme="cluster",
        out_dir="runs/desk",
    )


def _desk_cifar() -> RunConfig:
    cfg = _desk(0.5)
    cfg.net = NetConfig((1, 1, 2, 1), (16, 16, 16, 16), (1, 2, 2, 2), 3, 10)
    cfg.data = DataConfig("cifar10_subset", train_limit=5000, test_limit=1000)
    cfg.out_dir = "runs/desk-cifar"
    return cfg


def _paper_cifar10() -> RunConfig:
    return RunConfig(
        train=TrainConfig(
            batch_size=128, epochs_oabn=450, oabn_warmup=20, k=0.5, lr=0.1, momentum=0.9, weight_decay=1e-4,
            lr_schedule="cosine", lr_t_max=50, weight_bits=8, act_bits=8,
        ),
        net=NetConfig((4, 8, 12, 1), (64, 64, 64, 64), (1, 2, 2, 2), 3, 10),
        data=DataConfig("cifar10"),
        out_dir="runs/paper-cifar10",
    )


def _paper_imagenet() -> RunConfig:
    # k < 5 row: 160 epochs, step size 40
    return RunConfig(
        train=TrainConfig(
            batch_size=256, epochs_oabn=160, oabn_warmup=20, k=0.5, lr=0.1, momentum=0.9, weight_decay=1e-4,
            lr_schedule="step", lr_step=40, weight_bits=8, act_bits=8,
        ),
        net=NetConfig((2, 4, 14, 1), (48, 96, 192, 1280), (2, 2, 2, 2), 3, 1000, stem_stride=2),
        data=DataConfig("imagenet"),
        out_dir="runs/paper-imagenet",
    )


PRESETS = {
    "desk-synthetic": lambda: _desk(None),
    "desk-synthetic-oabn": lambda: _desk(0.5),
    "desk-cifar-subset": _desk_cifar,
    "paper-cifar10": _paper_cifar10,
    "paper-imagenet": _paper_imagenet,
}


def get_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})", "preset")
    cfg = PRESETS[name]()
    cfg.preset = name
    return cfg
