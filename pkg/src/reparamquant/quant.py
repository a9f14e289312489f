"""Per-layer quantizers and state-size accounting.

Weights: uniform symmetric or clustered (non-uniform). Activations: uniform
asymmetric over a calibrated ``(min, max)`` range. All rounding is
half-away-from-zero so results are reproducible bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .tensor import Tensor

SCHEMES = ("uniform_symmetric", "uniform_asymmetric", "cluster")


class QuantWarning(UserWarning):
    """Degenerate input to a quantizer (all-zero weights, empty range)."""


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def check_bits(bits: int) -> int:
    if int(bits) != bits or not 2 <= bits <= 8:
        raise ValueError(f"bit-width must be an integer in [2, 8], got {bits}")
    return int(bits)


@dataclass
class QuantSpec:
    bits: int
    scheme: str
    scale: Optional[float] = None
    zero_point: int = 0
    points: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "cluster":
            pts = np.asarray(self.points, dtype=np.float32)
            if pts.ndim != 1 or pts.size == 0 or pts.size > 2 ** self.bits:
                raise ValueError(f"cluster scheme needs 1..{2 ** self.bits} points, got {pts.shape}")
            if np.any(np.diff(pts) <= 0):
                raise ValueError("cluster points must be strictly increasing")
            self.points = pts
        elif not (self.scale is not None and self.scale > 0):
            raise ValueError(f"uniform scheme needs a positive scale, got {self.scale}")
        if self.scheme == "uniform_symmetric" and self.zero_point != 0:
            raise ValueError("symmetric quantization has zero_point 0")


@dataclass
class QuantizedLayer:
    codes: np.ndarray
    spec: QuantSpec
    bias: Optional[np.ndarray] = None

    def dequantize(self) -> np.ndarray:
        if self.spec.scheme == "cluster":
            return self.spec.points[self.codes]
        s = np.float32(self.spec.scale)
        return ((self.codes - self.spec.zero_point).astype(np.float32) * s).astype(np.float32)

    def distinct_values(self) -> int:
        return int(np.unique(self.dequantize()).size)


# ---------------------------------------------------------------------------
# uniform
# ---------------------------------------------------------------------------

def _values(w) -> np.ndarray:
    return (w.data if isinstance(w, Tensor) else np.asarray(w)).astype(np.float32)


def quantize_weights_uniform(w, bits: int, bias=None) -> QuantizedLayer:
    """Symmetric per-layer quantization: ``scale = max|w| / (2^(b-1) - 1)``."""
    bits = check_bits(bits)
    w = _values(w)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite values")
    qmax = 2 ** (bits - 1) - 1
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    if amax == 0.0:
        warnings.warn("all-zero weights; using scale 1", QuantWarning, stacklevel=2)
        scale = np.float32(1.0)
    else:
        scale = np.float32(amax / qmax)
    # codes from the exact ratio w * qmax / max|w|; dividing by the FP32-rounded
    # scale would move ties (-0.5 at 3 bits lands on -1.4999999)
    ratio = w.astype(np.float64) * qmax / amax if amax else w.astype(np.float64)
    codes = np.clip(round_half_away(ratio), -qmax - 1, qmax).astype(np.int32)
    spec = QuantSpec(bits, "uniform_symmetric", scale=float(scale))
    return QuantizedLayer(codes, spec, None if bias is None else np.asarray(bias, dtype=np.float32))


def activation_qparams(bits: int, lo: float, hi: float, literal_clamp: bool = False) -> tuple[float, int, int]:
    """Scale, zero point and top code for the asymmetric activation grid.

    ``literal_clamp`` selects the ``[0, 2^(b-1)]`` integer range instead of
    the full ``[0, 2^b - 1]``.
    """
    qtop = 2 ** (bits - 1) if literal_clamp else 2 ** bits - 1
    # FP64 scale keeps a zero-anchored range's endpoints exact
    scale = (float(hi) - float(lo)) / qtop
    zero = int(round_half_away(-float(lo) / scale))
    return scale, zero, qtop


def quantize_activations_uniform(x, bits: int, value_range, literal_clamp: bool = False):
    """Quantize-dequantize ``x`` on a uniform asymmetric grid.

    Returns the same kind it was given (Tensor or array). A degenerate range
    passes ``x`` through unchanged.
    """
    bits = check_bits(bits)
    lo, hi = (float(v) for v in value_range)
    arr = _values(x)
    if not lo < hi:
        if lo == hi:
            warnings.warn(f"degenerate activation range ({lo}, {hi}); passing through", QuantWarning, stacklevel=2)
            return x
        raise ValueError(f"activation range needs min < max, got ({lo}, {hi})")
    scale, zero, qtop = activation_qparams(bits, lo, hi, literal_clamp)
    q = np.clip(round_half_away(arr / scale) + zero, 0, qtop)
    out = ((q - zero) * scale).astype(np.float32)
    return Tensor(out) if isinstance(x, Tensor) else out


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def init_cluster_points(w, bits: int) -> np.ndarray:
    """``2^bits`` evenly spaced points from ``min(w)`` to ``max(w)``."""
    w = _values(w)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite values")
    lo, hi = float(w.min()), float(w.max())
    return np.linspace(lo, hi, 2 ** int(bits), dtype=np.float64).astype(np.float32)


def assign_nearest(w, points) -> tuple[np.ndarray, np.ndarray]:
    """Replace every weight with its nearest point; ties go to the lower index."""
    w = _values(w)
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 1 or pts.size == 0:
        raise ValueError("assign_nearest needs a nonempty 1-D point set")
    if np.any(np.diff(pts) < 0):
        raise ValueError("points must be sorted")
    flat = w.reshape(-1).astype(np.float64)
    p64 = pts.astype(np.float64)
    right = np.clip(np.searchsorted(p64, flat, side="left"), 0, pts.size - 1)
    left = np.clip(right - 1, 0, pts.size - 1)
    # duplicates: the lowest index holding a value wins
    left = np.searchsorted(p64, p64[left], side="left")
    right = np.searchsorted(p64, p64[right], side="left")
    pick_left = np.abs(flat - p64[left]) <= np.abs(flat - p64[right])
    idx = np.where(pick_left, left, right)
    return pts[idx].reshape(w.shape), idx.reshape(w.shape).astype(np.int32)


def lloyd_update(w, assignments, points) -> np.ndarray:
    """One centroid step: each point moves to the mean of its members.

    Empty clusters keep their value. The result is sorted.
    """
    w = _values(w).reshape(-1).astype(np.float64)
    pts = np.asarray(points, dtype=np.float32)
    a = np.asarray(assignments).reshape(-1)
    if a.size != w.size:
        raise ValueError("assignments and weights differ in size")
    if a.size and (a.min() < 0 or a.max() >= pts.size):
        raise ValueError(f"assignment index outside [0, {pts.size})")
    sums = np.bincount(a, weights=w, minlength=pts.size)
    counts = np.bincount(a, minlength=pts.size)
    new = pts.astype(np.float64).copy()
    occupied = counts > 0
    new[occupied] = sums[occupied] / counts[occupied]
    return np.sort(new.astype(np.float32))


def cluster_sse(w, points) -> float:
    wq, _ = assign_nearest(w, points)
    d = _values(w).astype(np.float64) - wq.astype(np.float64)
    return float(np.sum(d * d))


def cluster_quantized_layer(w, points, bias=None, bits: Optional[int] = None) -> QuantizedLayer:
    """Encode ``w`` against ``points``; unused or coincident points are dropped."""
    _, idx = assign_nearest(w, points)
    pts = np.asarray(points, dtype=np.float32)
    used = np.unique(pts[idx])
    codes = np.searchsorted(used, pts[idx]).astype(np.int32)
    if bits is None:
        bits = max(1, int(np.ceil(np.log2(max(pts.size, 2)))))
    spec = QuantSpec(bits, "cluster", points=used)
    return QuantizedLayer(codes, spec, None if bias is None else np.asarray(bias, dtype=np.float32))


def kmeans_points(w, bits: int, iters: int = 100) -> np.ndarray:
    """Linspace-initialized Lloyd iterations on frozen weights."""
    pts = init_cluster_points(w, bits)
    for _ in range(iters):
        _, idx = assign_nearest(w, pts)
        new = lloyd_update(w, idx, pts)
        if np.array_equal(new, pts):
            break
        pts = new
    return pts


# ---------------------------------------------------------------------------
# calibration and accounting
# ---------------------------------------------------------------------------

def calibrate_activations(dnet, batches: Iterable[np.ndarray]) -> list[tuple[float, float]]:
    """Running ``(min, max)`` of the activations entering each merged layer."""
    from .repvgg import deployed_forward

    ranges: list = [None] * len(dnet.layers)

    def hook(i, a):
        lo, hi = float(a.min()), float(a.max())
        if ranges[i] is None:
            ranges[i] = (lo, hi)
        else:
            ranges[i] = (min(ranges[i][0], lo), max(ranges[i][1], hi))

    seen = 0
    for xb in batches:
        if len(xb) == 0:
            continue
        deployed_forward(dnet, xb, quantize_acts=False, activation_hook=hook)
        seen += 1
    if seen == 0:
        raise ValueError("calibration needs at least one nonempty batch")
    return ranges


def state_size(dnet) -> int:
    """Distinct weight values summed over every merged layer.

    The stem conv and the classifier are excluded; quantized layers count
    their dequantized values.
    """
    return sum(int(np.unique(dnet.layer_kernel(i)).size) for i in range(len(dnet.layers)))


def layer_state_sizes(dnet) -> list[int]:
    return [int(np.unique(dnet.layer_kernel(i)).size) for i in range(len(dnet.layers))]
