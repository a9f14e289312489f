"""Differentiable operations on :class:`~reparamquant.tensor.Tensor`.

Layout is NCHW throughout. Reductions accumulate in FP64 where it matters for
BN statistics and the loss; everything stored stays FP32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Tensor, get_tape, needs_grad

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, requires_grad=needs_grad(a, b))
    if out.requires_grad:
        get_tape().record(
            "add", (a, b), out,
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, requires_grad=needs_grad(a, b))
    if out.requires_grad:
        get_tape().record(
            "mul", (a, b), out,
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )
    return out


def reduce_sum(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data, dtype=np.float64), requires_grad=needs_grad(a))
    if out.requires_grad:
        get_tape().record("reduce_sum", (a,), out, lambda g: (np.broadcast_to(g, a.shape),))
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=needs_grad(a))
    if out.requires_grad:
        get_tape().record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to the divergence guard
    out = Tensor(np.maximum(x.data, np.float32(0)), requires_grad=needs_grad(x))
    if out.requires_grad:
        get_tape().record("relu", (x,), out, lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation via channels-last im2col.

    ``x`` is ``[N, Cin, H, W]``, ``kernel`` is ``[Cout, Cin, kh, kw]``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError(f"conv2d supports 1x1 and 3x3 kernels, got {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {kernel.shape}")

    # channels-last im2col: cols[n, y, x, tap, c]
    xh = np.zeros((n, h + 2 * padding, w + 2 * padding, cin), dtype=np.float32)
    xh[:, padding : padding + h, padding : padding + w, :] = x.data.transpose(0, 2, 3, 1)
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    ys = [slice(i, i + (ho - 1) * stride + 1, stride) for i in range(kh)]
    xs = [slice(j, j + (wo - 1) * stride + 1, stride) for j in range(kw)]
    cols = np.empty((n, ho, wo, len(taps), cin), dtype=np.float32)
    for t, (i, j) in enumerate(taps):
        cols[:, :, :, t, :] = xh[:, ys[i], xs[j], :]
    cols = cols.reshape(n * ho * wo, len(taps) * cin)
    wmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1)).reshape(cout, -1)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 += bias.data
    out = Tensor(out2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2), requires_grad=needs_grad(x, kernel, bias))

    if out.requires_grad:
        def _backward(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
            gk = None
            if kernel.requires_grad:
                gk = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
            gb = g2.sum(axis=0, dtype=np.float64) if bias is not None and bias.requires_grad else None
            gx = None
            if x.requires_grad:
                dcols = (g2 @ wmat).reshape(n, ho, wo, len(taps), cin)
                gxh = np.zeros_like(xh)
                for t, (i, j) in enumerate(taps):
                    gxh[:, ys[i], xs[j], :] += dcols[:, :, :, t, :]
                gx = gxh[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
            return gx, gk, gb

        get_tape().record("conv2d", (x, kernel, bias), out, _backward)
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BnState:
    """Per-channel BN parameters and running statistics.

    ``gamma`` and ``beta`` are trainable tensors; the running statistics are
    plain arrays updated in train mode. ``tracked`` counts statistic updates.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    tracked: int = 0

    @classmethod
    def create(cls, channels: int, name: str = "bn", eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> "BnState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def validate(self) -> None:
        c = self.channels
        for arr in (self.beta.data, self.running_mean, self.running_var):
            if arr.shape != (c,):
                raise ValueError(f"BN arrays disagree on channel count: {arr.shape} vs ({c},)")
        if np.any(self.running_var < 0):
            raise ValueError("BN running_var must be nonnegative")
        if not self.eps > 0 or not 0 < self.momentum < 1:
            raise ValueError(f"invalid BN eps={self.eps} / momentum={self.momentum}")


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance, accumulated in FP64."""
    axes = (0, 2, 3)
    mean = x.mean(axis=axes, dtype=np.float64)
    var = np.square(x - mean.reshape(1, -1, 1, 1)).mean(axis=axes, dtype=np.float64)
    return mean, var


def update_running_stats(x: Tensor, state: BnState) -> tuple[np.ndarray, np.ndarray]:
    """Exponential update of the running statistics from one mini-batch."""
    if x.shape[1] != state.channels:
        raise ValueError(f"batch_norm channel mismatch: input {x.shape} vs state with {state.channels} channels")
    mean, var = batch_stats(x.data)
    m = state.momentum
    state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(np.float32)
    state.running_var = ((1 - m) * state.running_var + m * var).astype(np.float32)
    state.tracked += 1
    return mean, var


def batch_norm(
    x: Tensor,
    state: BnState,
    mode: str = "train",
    gamma_override: Optional[np.ndarray] = None,
    update_stats: bool = True,
) -> Tensor:
    """Batch normalization over ``[N, C, H, W]``.

    ``gamma_override`` replaces gamma in the forward computation only; the
    gradient it would receive is accumulated into ``state.gamma`` instead
    (straight-through). With ``update_stats=False`` train mode still
    normalizes by batch statistics but leaves the running estimates alone.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ValueError(f"batch_norm channel mismatch: input {x.shape} vs state with {state.channels} channels")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    gamma = state.gamma.data if gamma_override is None else np.asarray(gamma_override, dtype=np.float32)
    if gamma.shape != (state.channels,):
        raise ValueError(f"gamma_override shape {gamma.shape} does not match {state.channels} channels")

    if mode == "train":
        if update_stats:
            mean, var = update_running_stats(x, state)
        else:
            mean, var = batch_stats(x.data)
    else:
        mean, var = state.running_mean.astype(np.float64), state.running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(np.float32)
    xhat = (x.data - mean.astype(np.float32).reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = xhat * gamma.reshape(1, -1, 1, 1) + state.beta.data.reshape(1, -1, 1, 1)
    out = Tensor(y, requires_grad=needs_grad(x, state.gamma, state.beta))

    if out.requires_grad:
        m = x.shape[0] * x.shape[2] * x.shape[3]

        def _backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64)
            gx = None
            if x.requires_grad:
                scale = (gamma * inv_std).reshape(1, -1, 1, 1)
                if mode == "train":
                    gx = scale * (
                        g
                        - (gb / m).astype(np.float32).reshape(1, -1, 1, 1)
                        - xhat * (gg / m).astype(np.float32).reshape(1, -1, 1, 1)
                    )
                else:
                    gx = g * scale
            return gx, gg, gb

        get_tape().record("batch_norm", (x, state.gamma, state.beta), out, _backward)
    return out


# ---------------------------------------------------------------------------
# classifier head and loss
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias {bias.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y, requires_grad=needs_grad(x, weight, bias))
    if out.requires_grad:
        get_tape().record(
            "linear", (x, weight, bias), out,
            lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0) if bias is not None else None),
        )
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), dtype=np.float64), requires_grad=needs_grad(x))
    if out.requires_grad:
        get_tape().record(
            "global_avg_pool", (x,), out,
            lambda g: (np.broadcast_to((g / (h * w)).reshape(n, c, 1, 1), x.shape),),
        )
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross entropy shape mismatch: logits {logits.shape}, labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsumexp
    out = Tensor(-logp.mean(), requires_grad=needs_grad(logits))
    if out.requires_grad:
        def _backward(g):
            p = np.exp(z - logsumexp[:, None])
            p[np.arange(n), labels] -= 1.0
            return (p * (float(g) / n),)

        get_tape().record("softmax_cross_entropy", (logits,), out, _backward)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(
    params,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocities: Optional[dict] = None,
) -> None:
    """One SGD update with heavy-ball momentum and L2 decay; zeroes grads.

    ``velocities`` maps ``id(param)`` to its momentum buffer and is updated
    in place. Pass the same dict on every call to carry momentum.
    """
    if lr < 0 or not 0 <= momentum < 1 or weight_decay < 0:
        raise ValueError(f"invalid SGD hyper-parameters lr={lr}, momentum={momentum}, weight_decay={weight_decay}")
    params = list(params)
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ValueError(f"sgd_step: no gradient for {', '.join(missing)}")
    if velocities is None:
        velocities = {}
    for p in params:
        d = p.grad + np.float32(weight_decay) * p.data if weight_decay else p.grad
        v = velocities.get(id(p))
        v = d.copy() if v is None else np.float32(momentum) * v + d
        velocities[id(p)] = v
        p.data = (p.data - np.float32(lr) * v).astype(np.float32)
        p.grad = None


@dataclass
class SGD:
    """Stateful wrapper over :func:`sgd_step` with decay and no-decay groups."""

    decay_params: list
    plain_params: list = field(default_factory=list)
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocities: dict = field(default_factory=dict)

    def step(self, lr: float) -> None:
        sgd_step(self.decay_params, lr, self.momentum, self.weight_decay, self.velocities)
        if self.plain_params:
            sgd_step(self.plain_params, lr, self.momentum, 0.0, self.velocities)
