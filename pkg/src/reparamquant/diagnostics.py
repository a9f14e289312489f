"""Where the large merged weights sit, and where they come from.

Positions of a merged ``[Cout, Cin, 3, 3]`` kernel split into three classes:

* A: centre taps with ``o == i`` (3x3 + 1x1 + identity branch)
* B: the remaining centre taps (3x3 + 1x1)
* C: every off-centre tap (3x3 only)
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass
class ClassMasks:
    class_a: np.ndarray
    class_b: np.ndarray
    class_c: np.ndarray

    def counts(self) -> tuple[int, int, int]:
        return int(self.class_a.sum()), int(self.class_b.sum()), int(self.class_c.sum())


def class_masks(cout: int, cin: int) -> ClassMasks:
    if cout < 1 or cin < 1:
        raise ValueError(f"channel counts must be positive, got ({cout}, {cin})")
    centre = np.zeros((cout, cin, 3, 3), dtype=bool)
    centre[:, :, 1, 1] = True
    diag = np.zeros_like(centre)
    n = min(cout, cin)
    diag[np.arange(n), np.arange(n), 1, 1] = True
    return ClassMasks(diag, centre & ~diag, ~centre)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


@dataclass
class LayerOutliers:
    layer: int
    max_abs_a: float
    max_abs_b: float
    max_abs_c: float
    median_abs: float
    outlier_ratio: float
    class_a_values: Optional[list] = None
    identity_ratios: Optional[list] = None
    pearson_r: Optional[float] = None


@dataclass
class OutlierReport:
    layers: list = field(default_factory=list)

    @property
    def mean_outlier_ratio(self) -> float:
        vals = [l.outlier_ratio for l in self.layers if math.isfinite(l.outlier_ratio)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def identity_layers(self) -> list:
        return [l for l in self.layers if l.identity_ratios is not None]

    @property
    def pooled_pearson_r(self) -> float:
        """Pearson r over the Class-A/identity pairs of every identity layer."""
        ids = self.identity_layers
        if not ids:
            return float("nan")
        a = np.concatenate([l.class_a_values for l in ids])
        r = np.concatenate([l.identity_ratios for l in ids])
        return pearson(a, r)

    def summary(self) -> dict:
        out = {
            "mean_ratio": self.mean_outlier_ratio,
            "pooled_pearson_r": self.pooled_pearson_r,
        }
        for l in self.layers:
            p = f"layer{l.layer}"
            out[f"{p}.ratio"] = l.outlier_ratio
            out[f"{p}.max_a"] = l.max_abs_a
            out[f"{p}.max_b"] = l.max_abs_b
            out[f"{p}.max_c"] = l.max_abs_c
            out[f"{p}.median"] = l.median_abs
            if l.pearson_r is not None:
                out[f"{p}.pearson_r"] = l.pearson_r
        return out

    def to_dict(self) -> dict:
        return {"layers": [asdict(l) for l in self.layers], **self.summary()}


def identity_ratios(net) -> list:
    """Per block, ``gamma / sqrt(var + eps)`` of the identity BN (``None`` without one)."""
    from .repvgg import effective_identity_gamma

    out = []
    for b in net.blocks:
        if b.bn_id is None:
            out.append(None)
            continue
        g = effective_identity_gamma(b).astype(np.float64)
        out.append(g / np.sqrt(b.bn_id.running_var.astype(np.float64) + b.bn_id.eps))
    return out


def layer_outliers(kernel: np.ndarray, layer: int = 0, id_ratio: Optional[np.ndarray] = None) -> LayerOutliers:
    k = np.abs(np.asarray(kernel, dtype=np.float64))
    masks = class_masks(k.shape[0], k.shape[1])
    nz = k[k > 0]
    median = float(np.median(nz)) if nz.size else float("nan")
    max_a, max_b, max_c = (float(k[m].max()) if m.any() else 0.0 for m in (masks.class_a, masks.class_b, masks.class_c))
    ratio = max_a / median if nz.size else float("nan")
    rec = LayerOutliers(layer, max_a, max_b, max_c, median, ratio)
    if id_ratio is not None:
        n = min(k.shape[0], k.shape[1])
        a_vals = np.asarray(kernel, dtype=np.float64)[np.arange(n), np.arange(n), 1, 1]
        rec.class_a_values = [float(v) for v in a_vals]
        rec.identity_ratios = [float(v) for v in id_ratio]
        rec.pearson_r = pearson(a_vals, id_ratio)
    return rec


def outlier_report(source, identity: Optional[Sequence] = None) -> OutlierReport:
    """Outlier statistics for a network or a list of merged kernels.

    ``source`` may be a :class:`~reparamquant.repvgg.RepVggNet` (merged in
    memory, identity ratios taken from it), a
    :class:`~reparamquant.repvgg.DeployedNet`, or a sequence of kernels.
    ``identity`` gives one ratio array (or ``None``) per layer.
    """
    from .repvgg import DeployedNet, RepVggNet, convert_to_vgg

    if isinstance(source, RepVggNet):
        if identity is None:
            identity = identity_ratios(source)
        source = convert_to_vgg(source)
    if isinstance(source, DeployedNet):
        kernels = [source.layer_kernel(i) for i in range(len(source.layers))]
    else:
        kernels = [np.asarray(k) for k in source]
    if identity is not None and len(identity) != len(kernels):
        raise ValueError(f"{len(identity)} identity entries for {len(kernels)} layers")
    report = OutlierReport()
    for i, k in enumerate(kernels):
        ratio = None if identity is None else identity[i]
        report.layers.append(layer_outliers(k, i, None if ratio is None else np.asarray(ratio)))
    return report


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def weight_heatmap(kernel: np.ndarray, out_range: tuple, in_range: Optional[tuple] = None) -> np.ndarray:
    """Channel-blocked ``|w|`` grid: ``grid[3*o + h, 3*i + w] = |kernel[o0+o, i0+i, h, w]|``.

    With equal output and input ranges the Class-A taps land on the centres
    of the diagonal blocks.
    """
    k = np.asarray(kernel)
    in_range = out_range if in_range is None else in_range
    (o0, o1), (i0, i1) = out_range, in_range
    if not (0 <= o0 < o1 <= k.shape[0] and 0 <= i0 < i1 <= k.shape[1]):
        raise ValueError(f"channel ranges {out_range}/{in_range} out of bounds for kernel {k.shape}")
    sub = np.abs(k[o0:o1, i0:i1])
    no, ni = sub.shape[:2]
    return sub.transpose(0, 2, 1, 3).reshape(no * 3, ni * 3)


def write_heatmap_csv(grid: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])


def read_heatmap_csv(path) -> np.ndarray:
    with Path(path).open() as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_heatmap_pgm(grid: np.ndarray, path, cell: int = 8) -> None:
    """Grayscale binary PGM, brightest at the largest magnitude."""
    g = np.asarray(grid, dtype=np.float64)
    peak = g.max()
    img = np.zeros_like(g) if peak <= 0 else g / peak
    img = np.kron((img * 255).round().astype(np.uint8), np.ones((cell, cell), dtype=np.uint8))
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())
