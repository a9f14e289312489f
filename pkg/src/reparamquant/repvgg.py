"""Three-branch RepVGG blocks with Outlier-Aware BN and their 3x3 merge.

A block trains as ``ReLU(BN(conv3x3(x)) + BN(conv1x1(x)) + BN_id(x))`` and
deploys as ``ReLU(conv3x3(x; kernel, bias))``. The identity branch only exists
for stride 1 with matching channel counts.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .ops import BnState
from .tensor import Tensor

CLIP_BOUNDS = ("var", "std")


class MergeWarning(UserWarning):
    """BN statistics look uninitialized while merging."""


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

def _kaiming(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


@dataclass
class RepVggBlockParams:
    conv3: Tensor
    bn3: BnState
    conv1: Tensor
    bn1: BnState
    bn_id: Optional[BnState]
    stride: int = 1
    oabn_k: Optional[float] = None
    oabn_bound: str = "var"

    @classmethod
    def create(cls, cin: int, cout: int, stride: int, rng: np.random.Generator, name: str = "block") -> "RepVggBlockParams":
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        has_id = stride == 1 and cin == cout
        return cls(
            conv3=Tensor(_kaiming(rng, (cout, cin, 3, 3)), requires_grad=True, name=f"{name}.conv3"),
            bn3=BnState.create(cout, f"{name}.bn3"),
            conv1=Tensor(_kaiming(rng, (cout, cin, 1, 1)), requires_grad=True, name=f"{name}.conv1"),
            bn1=BnState.create(cout, f"{name}.bn1"),
            bn_id=BnState.create(cout, f"{name}.bn_id") if has_id else None,
            stride=stride,
        )

    @property
    def in_channels(self) -> int:
        return self.conv3.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv3.shape[0]

    def bn_states(self) -> list[BnState]:
        return [bn for bn in (self.bn3, self.bn1, self.bn_id) if bn is not None]

    def validate(self) -> None:
        if self.conv3.shape[:2] != self.conv1.shape[:2]:
            raise ValueError(f"conv3 {self.conv3.shape} and conv1 {self.conv1.shape} disagree on channels")
        if self.conv3.shape[2:] != (3, 3) or self.conv1.shape[2:] != (1, 1):
            raise ValueError("branch kernels must be 3x3 and 1x1")
        expect_id = self.stride == 1 and self.in_channels == self.out_channels
        if expect_id != (self.bn_id is not None):
            raise ValueError("identity BN must be present iff stride == 1 and Cin == Cout")
        if self.oabn_k is not None and not self.oabn_k > 0:
            raise ValueError(f"OABN threshold must be positive, got {self.oabn_k}")
        for bn in self.bn_states():
            if bn.channels != self.out_channels:
                raise ValueError(f"BN with {bn.channels} channels in a block with {self.out_channels} outputs")
            bn.validate()


@dataclass
class MergedConv:
    """A deploy-structure layer: one 3x3 convolution with bias (ReLU follows)."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


@dataclass(frozen=True)
class NetConfig:
    depths: tuple = (1, 1, 2, 1)
    widths: tuple = (16, 16, 16, 16)
    strides: tuple = (1, 1, 2, 2)
    in_channels: int = 3
    num_classes: int = 10
    stem_stride: int = 1

    def __post_init__(self):
        if not (len(self.depths) == len(self.widths) == len(self.strides)):
            raise ValueError("depths, widths and strides need one entry per stage")
        if any(d < 1 for d in self.depths) or any(w < 1 for w in self.widths):
            raise ValueError("stage depths and widths must be positive")
        if any(s not in (1, 2) for s in (*self.strides, self.stem_stride)):
            raise ValueError("strides must be 1 or 2")

    def to_dict(self) -> dict:
        return {
            "depths": list(self.depths), "widths": list(self.widths), "strides": list(self.strides),
            "in_channels": self.in_channels, "num_classes": self.num_classes, "stem_stride": self.stem_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(
            tuple(d["depths"]), tuple(d["widths"]), tuple(d["strides"]), d["in_channels"], d["num_classes"],
            d.get("stem_stride", 1),
        )


@dataclass
class RepVggNet:
    """FP32 stem conv, RepVGG stages, and a global-pool + linear head.

    The stem conv and the head are the two layers that always stay FP32.
    """

    config: NetConfig
    stem_weight: Tensor
    stem_bias: Tensor
    blocks: list
    head_weight: Tensor
    head_bias: Tensor
    stem_stride: int = 1
    fp32_always: tuple = ("stem", "head")
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: NetConfig, seed: int = 0) -> "RepVggNet":
        rng = np.random.default_rng(seed)
        c0 = config.widths[0]
        stem_w = Tensor(_kaiming(rng, (c0, config.in_channels, 3, 3)), requires_grad=True, name="stem.weight")
        stem_b = Tensor(np.zeros(c0), requires_grad=True, name="stem.bias")
        blocks = []
        cin = c0
        for s, (depth, width, stride) in enumerate(zip(config.depths, config.widths, config.strides)):
            for d in range(depth):
                blocks.append(RepVggBlockParams.create(cin, width, stride if d == 0 else 1, rng, f"blocks.{len(blocks)}"))
                cin = width
        bound = 1.0 / math.sqrt(cin)
        head_w = Tensor(rng.uniform(-bound, bound, size=(config.num_classes, cin)), requires_grad=True, name="head.weight")
        head_b = Tensor(np.zeros(config.num_classes), requires_grad=True, name="head.bias")
        net = cls(config, stem_w, stem_b, blocks, head_w, head_b, stem_stride=config.stem_stride)
        net.validate()
        return net

    def validate(self) -> None:
        cin = self.stem_weight.shape[0]
        for i, b in enumerate(self.blocks):
            b.validate()
            if b.in_channels != cin:
                raise ValueError(f"block {i} expects {b.in_channels} input channels, previous layer gives {cin}")
            cin = b.out_channels
        if self.head_weight.shape[1] != cin:
            raise ValueError(f"head expects {self.head_weight.shape[1]} features, last block gives {cin}")

    def decay_parameters(self) -> list[Tensor]:
        ps = [self.stem_weight]
        for b in self.blocks:
            ps += [b.conv3, b.conv1]
        return ps + [self.head_weight]

    def plain_parameters(self) -> list[Tensor]:
        ps = [self.stem_bias]
        for b in self.blocks:
            for bn in b.bn_states():
                ps += [bn.gamma, bn.beta]
        return ps + [self.head_bias]

    def parameters(self) -> list[Tensor]:
        return self.decay_parameters() + self.plain_parameters()


# ---------------------------------------------------------------------------
# OABN
# ---------------------------------------------------------------------------

def clip_band(running_var: np.ndarray, k: float, bound: str = "var") -> np.ndarray:
    """Half-width of the gamma band: ``k * var`` (default) or ``k * std``."""
    if not k > 0:
        raise ValueError(f"OABN threshold k must be positive, got {k}")
    if bound not in CLIP_BOUNDS:
        raise ValueError(f"unknown clip bound {bound!r}; expected one of {CLIP_BOUNDS}")
    var = np.asarray(running_var, dtype=np.float64)
    return k * (var if bound == "var" else np.sqrt(var))


def oabn_clip_gamma(gamma, running_var, k: float, bound: str = "var") -> np.ndarray:
    """Clip each channel's gamma into ``[-k*var, k*var]``; the input is not modified."""
    gamma = np.asarray(gamma, dtype=np.float32)
    running_var = np.asarray(running_var, dtype=np.float32)
    if gamma.shape != running_var.shape:
        raise ValueError(f"gamma {gamma.shape} and running_var {running_var.shape} differ in length")
    if np.any(running_var < 0):
        raise ValueError("running_var must be nonnegative")
    if math.isinf(k):
        return gamma.copy()
    band = clip_band(running_var, k, bound)
    with np.errstate(invalid="ignore"):
        clipped = np.minimum(np.maximum(gamma.astype(np.float64), -band), band)
    return clipped.astype(np.float32)


def effective_identity_gamma(p: RepVggBlockParams) -> Optional[np.ndarray]:
    """Identity-BN gamma as seen by the forward pass and by the merge."""
    if p.bn_id is None:
        return None
    if p.oabn_k is None:
        return p.bn_id.gamma.data
    return oabn_clip_gamma(p.bn_id.gamma.data, p.bn_id.running_var, p.oabn_k, p.oabn_bound)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def block_forward(
    x: Tensor,
    block: Union[RepVggBlockParams, MergedConv],
    mode: str = "train",
    oabn_active: Optional[bool] = None,
) -> Tensor:
    """Run one block.

    ``mode`` is ``"train"`` (batch statistics), ``"eval"`` (running
    statistics, still three branches) or ``"deploy"`` (merged conv).
    OABN defaults to active whenever the block carries a threshold.
    """
    if mode == "deploy":
        if not isinstance(block, MergedConv):
            raise ValueError("deploy mode needs a merged block; call merge_block first")
        out = ops.conv2d(x, Tensor(block.kernel), Tensor(block.bias), stride=block.stride, padding=1)
        return ops.relu(out)
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown block mode {mode!r}")
    if isinstance(block, MergedConv):
        raise ValueError(f"{mode} mode needs the three-branch block, got a merged one")
    p = block
    if oabn_active is None:
        oabn_active = p.oabn_k is not None
    if oabn_active and p.oabn_k is None:
        raise ValueError("OABN requested on a block without a threshold k")

    y = ops.add(
        ops.batch_norm(ops.conv2d(x, p.conv3, stride=p.stride, padding=1), p.bn3, mode),
        ops.batch_norm(ops.conv2d(x, p.conv1, stride=p.stride, padding=0), p.bn1, mode),
    )
    if p.bn_id is not None:
        if oabn_active:
            # statistics first, then clip against the refreshed running variance
            if mode == "train":
                ops.update_running_stats(x, p.bn_id)
            gamma_c = oabn_clip_gamma(p.bn_id.gamma.data, p.bn_id.running_var, p.oabn_k, p.oabn_bound)
            y_id = ops.batch_norm(x, p.bn_id, mode, gamma_override=gamma_c, update_stats=False)
        else:
            y_id = ops.batch_norm(x, p.bn_id, mode)
        y = ops.add(y, y_id)
    return ops.relu(y)


def net_forward(net: RepVggNet, x: Tensor, mode: str = "train", oabn_active: Optional[bool] = None) -> Tensor:
    h = ops.relu(ops.conv2d(x, net.stem_weight, net.stem_bias, stride=net.stem_stride, padding=1))
    for b in net.blocks:
        h = block_forward(h, b, mode, oabn_active)
    return ops.linear(ops.global_avg_pool(h), net.head_weight, net.head_bias)


# ---------------------------------------------------------------------------
# merge algebra
# ---------------------------------------------------------------------------

def _bn_scale_shift(bn: BnState, gamma: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    g = (bn.gamma.data if gamma is None else gamma).astype(np.float64)
    std = np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    scale = g / std
    shift = bn.beta.data.astype(np.float64) - scale * bn.running_mean.astype(np.float64)
    return scale, shift


def fuse_bn_into_conv(kernel, bn: BnState) -> tuple[np.ndarray, np.ndarray]:
    """Fold an eval-mode BN into the preceding bias-free conv."""
    k = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel)
    if k.ndim != 4 or k.shape[0] != bn.channels:
        raise ValueError(f"kernel {k.shape} does not match BN with {bn.channels} channels")
    scale, shift = _bn_scale_shift(bn)
    fused = k.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
    return fused.astype(np.float32), shift.astype(np.float32)


def pad_1x1_to_3x3(kernel1) -> np.ndarray:
    k = kernel1.data if isinstance(kernel1, Tensor) else np.asarray(kernel1)
    if k.ndim != 4 or k.shape[2:] != (1, 1):
        raise ValueError(f"expected a [Cout, Cin, 1, 1] kernel, got {k.shape}")
    out = np.zeros(k.shape[:2] + (3, 3), dtype=k.dtype)
    out[:, :, 1, 1] = k[:, :, 0, 0]
    return out


def identity_to_conv(bn_id: BnState, channels: int, gamma: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Equivalent 3x3 kernel and bias of an identity-branch BN."""
    if bn_id.channels != channels:
        raise ValueError(f"identity BN has {bn_id.channels} channels, expected {channels}")
    scale, shift = _bn_scale_shift(bn_id, gamma)
    kernel = np.zeros((channels, channels, 3, 3), dtype=np.float64)
    idx = np.arange(channels)
    kernel[idx, idx, 1, 1] = scale
    return kernel.astype(np.float32), shift.astype(np.float32)


def _check_stats(p: RepVggBlockParams) -> None:
    for bn in p.bn_states():
        if bn.tracked == 0 or not np.any(bn.running_var > 0):
            warnings.warn(
                "merging BN with uninitialized running statistics; variance is guarded by eps",
                MergeWarning,
                stacklevel=3,
            )
            return


def merge_block(p: RepVggBlockParams) -> MergedConv:
    """Collapse the three branches into one 3x3 conv (eval-mode BN)."""
    p.validate()
    _check_stats(p)
    k3, b3 = fuse_bn_into_conv(p.conv3, p.bn3)
    k1, b1 = fuse_bn_into_conv(p.conv1, p.bn1)
    kernel = k3.astype(np.float64) + pad_1x1_to_3x3(k1).astype(np.float64)
    bias = b3.astype(np.float64) + b1.astype(np.float64)
    if p.bn_id is not None:
        kid, bid = identity_to_conv(p.bn_id, p.out_channels, effective_identity_gamma(p))
        kernel += kid
        bias += bid
    merged = MergedConv(kernel.astype(np.float32), bias.astype(np.float32), p.stride)
    if not (np.all(np.isfinite(merged.kernel)) and np.all(np.isfinite(merged.bias))):
        raise FloatingPointError("merged kernel contains non-finite values")
    return merged


@dataclass
class DeployedNet:
    """Single-branch network: FP32 stem, merged 3x3 layers, FP32 head.

    ``weight_quant[i]`` (a :class:`~reparamquant.quant.QuantizedLayer`)
    replaces layer ``i``'s kernel when set; ``act_ranges[i]`` quantizes the
    activations entering layer ``i``.
    """

    stem: MergedConv
    layers: list
    head_weight: np.ndarray
    head_bias: np.ndarray
    weight_quant: list = field(default_factory=list)
    act_ranges: list = field(default_factory=list)
    act_bits: Optional[int] = None
    act_literal_clamp: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.weight_quant:
            self.weight_quant = [None] * len(self.layers)
        if not self.act_ranges:
            self.act_ranges = [None] * len(self.layers)

    def layer_kernel(self, i: int) -> np.ndarray:
        q = self.weight_quant[i]
        return self.layers[i].kernel if q is None else q.dequantize()

    def copy(self) -> "DeployedNet":
        return DeployedNet(
            self.stem, list(self.layers), self.head_weight, self.head_bias,
            list(self.weight_quant), list(self.act_ranges), self.act_bits, self.act_literal_clamp, dict(self.meta),
        )


def convert_to_vgg(net: RepVggNet) -> DeployedNet:
    """Merge every block; stem and head are carried over unchanged."""
    net.validate()
    stem = MergedConv(net.stem_weight.data.copy(), net.stem_bias.data.copy(), net.stem_stride)
    layers = [merge_block(b) for b in net.blocks]
    return DeployedNet(stem, layers, net.head_weight.data.copy(), net.head_bias.data.copy(), meta=dict(net.meta))


def deployed_forward(
    dnet: DeployedNet,
    x: np.ndarray,
    quantize_acts: bool = True,
    activation_hook=None,
    dynamic_acts: bool = False,
) -> np.ndarray:
    """Logits of the deploy structure. No gradients are recorded.

    ``activation_hook(i, a)`` sees the FP activations entering layer ``i``.
    With ``dynamic_acts`` each layer's input range is taken from the current
    batch instead of ``dnet.act_ranges``.
    """
    from .quant import quantize_activations_uniform
    from .tensor import no_grad

    with no_grad():
        h = ops.relu(ops.conv2d(Tensor(x), Tensor(dnet.stem.kernel), Tensor(dnet.stem.bias), dnet.stem.stride, 1))
        for i, layer in enumerate(dnet.layers):
            if activation_hook is not None:
                activation_hook(i, h.data)
            rng_i = dnet.act_ranges[i]
            if dynamic_acts:
                lo, hi = float(h.data.min()), float(h.data.max())
                rng_i = (lo, hi) if hi > lo else None
            if quantize_acts and rng_i is not None and dnet.act_bits is not None:
                h = quantize_activations_uniform(h, dnet.act_bits, rng_i, literal_clamp=dnet.act_literal_clamp)
            w = MergedConv(dnet.layer_kernel(i), layer.bias, layer.stride)
            h = block_forward(h, w, "deploy")
        pooled = ops.global_avg_pool(h)
        return ops.linear(pooled, Tensor(dnet.head_weight), Tensor(dnet.head_bias)).data


def bake_oabn(net: RepVggNet) -> None:
    """Write the clipped identity gamma back into every OABN block and drop k.

    Afterwards the plain forward reproduces the OABN forward, so later phases
    can run with OABN off without reviving the clipped-away outliers.
    """
    for b in net.blocks:
        if b.bn_id is not None and b.oabn_k is not None:
            b.bn_id.gamma.data = effective_identity_gamma(b).copy()
        b.oabn_k = None


def set_oabn(net: RepVggNet, k: Optional[float], bound: str = "var") -> None:
    for b in net.blocks:
        b.oabn_k = k
        b.oabn_bound = bound


def identity_blocks(net: RepVggNet) -> Sequence[int]:
    return [i for i, b in enumerate(net.blocks) if b.bn_id is not None]
