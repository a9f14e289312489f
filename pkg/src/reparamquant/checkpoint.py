"""Little-endian binary checkpoints.

Layout::

    b"RPQW"  u16 version  u32 metadata length  UTF-8 JSON metadata
    repeated until EOF:
        u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = i32), u8 rank,
        rank x u32 dims, payload

Train-structure nets and deployed (optionally quantized) nets share the
format; ``metadata["kind"]`` tells them apart.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .ops import BnState
from .quant import QuantizedLayer, QuantSpec
from .repvgg import DeployedNet, MergedConv, NetConfig, RepVggBlockParams, RepVggNet
from .tensor import Tensor

MAGIC = b"RPQW"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
KIND_TRAIN = "train"
KIND_DEPLOYED = "deployed"


class CheckpointError(ValueError):
    pass


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot store {type(o).__name__} in checkpoint metadata")


def encode(meta: dict, tensors: dict) -> bytes:
    """Serialize metadata and an ordered name -> array mapping."""
    doc = json.dumps(meta, sort_keys=True, separators=(",", ":"), default=_json_default).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(doc)), doc]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            code = 0
        elif arr.dtype == np.int32:
            code = 1
        else:
            raise CheckpointError(f"tensor {name!r} has dtype {arr.dtype}; only float32 and int32 are stored")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<HBB", len(raw_name), code, arr.ndim))
        parts.append(raw_name)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> tuple[dict, dict]:
    """Parse a whole checkpoint; nothing is returned unless every record is valid."""
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(raw) < 10:
        raise CheckpointError("truncated header")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 10
    if pos + n > len(raw):
        raise CheckpointError("truncated metadata")
    try:
        meta = json.loads(raw[pos : pos + n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"unreadable metadata: {exc}") from None
    pos += n
    tensors: dict = {}
    while pos < len(raw):
        start = pos
        if pos + 4 > len(raw):
            raise CheckpointError(f"truncated record header at byte {start}")
        name_len, code, rank = struct.unpack_from("<HBB", raw, pos)
        pos += 4
        if code not in DTYPES:
            raise CheckpointError(f"unknown dtype code {code} at byte {start}")
        end = pos + name_len + 4 * rank
        if end > len(raw):
            raise CheckpointError(f"truncated record header at byte {start}")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4
        if pos + nbytes > len(raw):
            raise CheckpointError(f"tensor {name!r} truncated at byte {start}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(raw, DTYPES[code], int(np.prod(dims, dtype=np.int64)), pos).reshape(dims).astype(DTYPES[code].newbyteorder("="))
        pos += nbytes
    return meta, tensors


# ---------------------------------------------------------------------------
# train-structure nets
# ---------------------------------------------------------------------------

BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")
BN_NAMES = ("bn3", "bn1", "bn_id")


def _bn_arrays(bn: BnState) -> dict:
    return {"gamma": bn.gamma.data, "beta": bn.beta.data, "running_mean": bn.running_mean, "running_var": bn.running_var}


def net_to_records(net: RepVggNet, meta: dict | None = None) -> tuple[dict, dict]:
    tensors = {"stem.weight": net.stem_weight.data, "stem.bias": net.stem_bias.data}
    blocks = []
    for i, b in enumerate(net.blocks):
        p = f"blocks.{i}"
        tensors[f"{p}.conv3"] = b.conv3.data
        tensors[f"{p}.conv1"] = b.conv1.data
        bns = {}
        for bn_name in BN_NAMES:
            bn = getattr(b, bn_name)
            if bn is None:
                continue
            for key, arr in _bn_arrays(bn).items():
                tensors[f"{p}.{bn_name}.{key}"] = arr
            bns[bn_name] = {"eps": bn.eps, "momentum": bn.momentum, "tracked": bn.tracked}
        blocks.append({"stride": b.stride, "oabn_k": b.oabn_k, "oabn_bound": b.oabn_bound, "bn": bns})
    tensors["head.weight"] = net.head_weight.data
    tensors["head.bias"] = net.head_bias.data
    doc = {
        "kind": KIND_TRAIN,
        "net_config": net.config.to_dict(),
        "stem_stride": net.stem_stride,
        "blocks": blocks,
        "net_meta": {k: v for k, v in net.meta.items() if k != "velocities"},
        **(meta or {}),
    }
    return doc, tensors


def _take(tensors: dict, name: str) -> np.ndarray:
    try:
        return tensors.pop(name)
    except KeyError:
        raise CheckpointError(f"checkpoint is missing tensor {name!r}") from None


def net_from_records(meta: dict, tensors: dict) -> RepVggNet:
    if meta.get("kind") != KIND_TRAIN:
        raise CheckpointError(f"expected a train-structure checkpoint, got kind {meta.get('kind')!r}")
    tensors = dict(tensors)
    config = NetConfig.from_dict(meta["net_config"])
    blocks = []
    for i, bm in enumerate(meta["blocks"]):
        p = f"blocks.{i}"
        bns = {}
        for bn_name in BN_NAMES:
            if bn_name not in bm["bn"]:
                bns[bn_name] = None
                continue
            info = bm["bn"][bn_name]
            a = {key: _take(tensors, f"{p}.{bn_name}.{key}") for key in BN_FIELDS}
            bns[bn_name] = BnState(
                Tensor(a["gamma"], requires_grad=True, name=f"{p}.{bn_name}.gamma"),
                Tensor(a["beta"], requires_grad=True, name=f"{p}.{bn_name}.beta"),
                a["running_mean"].copy(), a["running_var"].copy(),
                info["eps"], info["momentum"], info["tracked"],
            )
        blocks.append(RepVggBlockParams(
            Tensor(_take(tensors, f"{p}.conv3"), requires_grad=True, name=f"{p}.conv3"), bns["bn3"],
            Tensor(_take(tensors, f"{p}.conv1"), requires_grad=True, name=f"{p}.conv1"), bns["bn1"],
            bns["bn_id"], bm["stride"], bm["oabn_k"], bm["oabn_bound"],
        ))
    net = RepVggNet(
        config,
        Tensor(_take(tensors, "stem.weight"), requires_grad=True, name="stem.weight"),
        Tensor(_take(tensors, "stem.bias"), requires_grad=True, name="stem.bias"),
        blocks,
        Tensor(_take(tensors, "head.weight"), requires_grad=True, name="head.weight"),
        Tensor(_take(tensors, "head.bias"), requires_grad=True, name="head.bias"),
        stem_stride=meta["stem_stride"],
        meta=dict(meta.get("net_meta", {})),
    )
    if tensors:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(tensors)}")
    net.validate()
    return net


# ---------------------------------------------------------------------------
# deployed nets
# ---------------------------------------------------------------------------

def _spec_doc(spec: QuantSpec) -> dict:
    return {"bits": spec.bits, "scheme": spec.scheme, "scale": spec.scale, "zero_point": spec.zero_point}


def deployed_to_records(dnet: DeployedNet, meta: dict | None = None) -> tuple[dict, dict]:
    tensors = {"stem.kernel": dnet.stem.kernel, "stem.bias": dnet.stem.bias}
    layers = []
    for i, (layer, q) in enumerate(zip(dnet.layers, dnet.weight_quant)):
        p = f"layers.{i}"
        tensors[f"{p}.kernel"] = layer.kernel
        tensors[f"{p}.bias"] = layer.bias
        entry = {"stride": layer.stride, "quant": None}
        if q is not None:
            tensors[f"{p}.codes"] = q.codes.astype(np.int32)
            if q.spec.scheme == "cluster":
                tensors[f"{p}.points"] = q.spec.points
            entry["quant"] = _spec_doc(q.spec)
        layers.append(entry)
    tensors["head.weight"] = dnet.head_weight
    tensors["head.bias"] = dnet.head_bias
    doc = {
        "kind": KIND_DEPLOYED,
        "stem_stride": dnet.stem.stride,
        "layers": layers,
        "act_bits": dnet.act_bits,
        "act_literal_clamp": dnet.act_literal_clamp,
        "act_ranges": [None if r is None else [float(r[0]), float(r[1])] for r in dnet.act_ranges],
        "net_meta": dnet.meta,
        **(meta or {}),
    }
    return doc, tensors


def deployed_from_records(meta: dict, tensors: dict) -> DeployedNet:
    if meta.get("kind") != KIND_DEPLOYED:
        raise CheckpointError(f"expected a deployed checkpoint, got kind {meta.get('kind')!r}")
    tensors = dict(tensors)
    stem = MergedConv(_take(tensors, "stem.kernel"), _take(tensors, "stem.bias"), meta["stem_stride"])
    layers, wq = [], []
    for i, entry in enumerate(meta["layers"]):
        p = f"layers.{i}"
        layers.append(MergedConv(_take(tensors, f"{p}.kernel"), _take(tensors, f"{p}.bias"), entry["stride"]))
        qd = entry["quant"]
        if qd is None:
            wq.append(None)
            continue
        points = _take(tensors, f"{p}.points") if qd["scheme"] == "cluster" else None
        spec = QuantSpec(qd["bits"], qd["scheme"], qd["scale"], qd["zero_point"], points)
        wq.append(QuantizedLayer(_take(tensors, f"{p}.codes"), spec, layers[-1].bias))
    head_w, head_b = _take(tensors, "head.weight"), _take(tensors, "head.bias")
    if tensors:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(tensors)}")
    ranges = [None if r is None else (r[0], r[1]) for r in meta["act_ranges"]]
    return DeployedNet(stem, layers, head_w, head_b, wq, ranges, meta["act_bits"], meta["act_literal_clamp"], dict(meta.get("net_meta", {})))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

Model = Union[RepVggNet, DeployedNet]


def save(path, model: Model, meta: dict | None = None) -> None:
    if isinstance(model, RepVggNet):
        doc, tensors = net_to_records(model, meta)
    elif isinstance(model, DeployedNet):
        doc, tensors = deployed_to_records(model, meta)
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(doc, tensors))
    tmp.replace(path)


def load(path) -> tuple[Model, dict]:
    """Read a checkpoint and rebuild the net it holds, plus its metadata."""
    meta, tensors = decode(Path(path).read_bytes())
    kind = meta.get("kind")
    if kind == KIND_TRAIN:
        return net_from_records(meta, tensors), meta
    if kind == KIND_DEPLOYED:
        return deployed_from_records(meta, tensors), meta
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")
