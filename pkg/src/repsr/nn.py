"""Layer primitives with hand-written backward passes.

Every ``*_forward`` accepts an optional :class:`GradTape`. When one is given the
forward stores what its backward needs; the matching ``*_backward`` consumes the
tape exactly once.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, check_finite

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25


class StaleTapeError(RuntimeError):
    """A tape was reused, or read before its forward pass ran."""


class DegenerateBatchError(ValueError):
    pass


class BnMode(str, enum.Enum):
    BATCH = "batch"
    FROZEN = "frozen"
    INFERENCE = "inference"


class GradTape:
    """Cache of one forward call, consumed by one backward call."""

    __slots__ = ("_items", "_state")

    def __init__(self) -> None:
        self._items: dict | None = None
        self._state = "empty"

    def save(self, **items) -> None:
        if self._state != "empty":
            raise StaleTapeError("tape already recorded a forward pass")
        self._items = items
        self._state = "filled"

    def load(self) -> dict:
        if self._state == "empty":
            raise StaleTapeError("tape has no recorded forward pass")
        if self._state == "used":
            raise StaleTapeError("tape was already consumed by a backward pass")
        self._state = "used"
        items, self._items = self._items, None
        return items


@dataclass
class ConvParams:
    weight: np.ndarray  # (Cout, Cin, K, K)
    bias: np.ndarray  # (Cout,)

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
            raise ShapeError(f"conv weight must be (Cout, Cin, K, K) with K in {{1, 3}}, got {w.shape}")
        if self.bias.shape != (w.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match Cout={w.shape[0]}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    @classmethod
    def zeros(cls, cout: int, cin: int, k: int, dtype=np.float32) -> "ConvParams":
        return cls(np.zeros((cout, cin, k, k), dtype), np.zeros(cout, dtype))

    def copy(self) -> "ConvParams":
        return ConvParams(self.weight.copy(), self.bias.copy())

    def astype(self, dtype) -> "ConvParams":
        return ConvParams(self.weight.astype(dtype), self.bias.astype(dtype))

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: BnMode = BnMode.BATCH

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c) or len(c) != 1:
            raise ShapeError("BN parameter vectors must share one 1-d shape")
        if self.eps <= 0:
            raise ValueError("BN eps must be positive")
        if not 0 < self.momentum <= 1:
            raise ValueError("BN momentum must lie in (0, 1]")
        self.mode = BnMode(self.mode)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BnParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)

    def copy(self) -> "BnParams":
        return BnParams(self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
                        self.running_var.copy(), self.eps, self.momentum, self.mode)

    def astype(self, dtype) -> "BnParams":
        return BnParams(self.gamma.astype(dtype), self.beta.astype(dtype), self.running_mean.astype(dtype),
                        self.running_var.astype(dtype), self.eps, self.momentum, self.mode)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) such that population-stat BN(x) == x*scale + shift."""
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - self.running_mean * scale


def _check_channels(x: np.ndarray, expected: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected an (n, c, h, w) tensor, got shape {x.shape}")
    if x.shape[1] != expected:
        raise ShapeError(f"{what}: input has {x.shape[1]} channels, expected {expected}")


# ---------------------------------------------------------------------------
# convolution (im2col + matmul)

def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) columns of the zero-padded 'same' neighbourhoods."""
    n, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    cols = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, c * k * k, h * w)


def _conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, w = x.shape
    cout, cin, k, _ = weight.shape
    cols = x.reshape(n, cin, h * w) if k == 1 else im2col(x, k)
    out = np.matmul(weight.reshape(cout, cin * k * k), cols)
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(n, cout, h, w), cols


def conv2d_forward(x: np.ndarray, p: ConvParams, tape: GradTape | None = None) -> np.ndarray:
    """Stride-1 'same' convolution with zero padding (K-1)/2."""
    _check_channels(x, p.in_channels, "conv2d")
    out, cols = _conv(x, p.weight, p.bias)
    if tape is not None:
        tape.save(cols=cols, in_shape=x.shape)
    return check_finite(out, "conv2d output")


def conv2d_backward(grad_out: np.ndarray, tape: GradTape, p: ConvParams):
    """Return ``(grad_in, grad_weight, grad_bias)``."""
    saved = tape.load()
    n, cin, h, w = saved["in_shape"]
    if grad_out.shape != (n, p.out_channels, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
    cols = saved["cols"]
    k = p.kernel_size
    g = grad_out.reshape(n, p.out_channels, h * w)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
    # Gradient wrt the input is the 'same' correlation with the flipped, transposed kernel.
    w_t = np.ascontiguousarray(p.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_in, _ = _conv(grad_out, w_t, None)
    return grad_in, grad_w.astype(p.weight.dtype, copy=False), grad_b


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm_forward(x: np.ndarray, p: BnParams, tape: GradTape | None = None,
                      mode: BnMode | None = None) -> np.ndarray:
    """Batch normalization; ``mode`` overrides ``p.mode`` for this call only.

    In Batch mode the running statistics of ``p`` are updated in place.
    """
    _check_channels(x, p.channels, "batchnorm")
    mode = BnMode(mode or p.mode)
    if mode is BnMode.BATCH:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count <= 1:
            raise DegenerateBatchError("batch statistics need more than one value per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        p.running_var[...] = (1 - m) * p.running_var + m * var
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    if tape is not None:
        tape.save(xhat=xhat, inv_std=inv_std, mode=mode)
    return check_finite(out, "batchnorm output")


def batchnorm_backward(grad_out: np.ndarray, tape: GradTape, p: BnParams):
    """Return ``(grad_in, grad_gamma, grad_beta)``.

    Inference mode treats gamma/beta as constants and returns ``None`` for them.
    """
    saved = tape.load()
    xhat, inv_std, mode = saved["xhat"], saved["inv_std"], saved["mode"]
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output")
    gamma = p.gamma[None, :, None, None]
    inv = inv_std[None, :, None, None]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma
    if mode is BnMode.BATCH:
        count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        s1 = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        grad_in = inv * (gxhat - s1 / count - xhat * s2 / count)
    else:
        grad_in = gxhat * inv
    if mode is BnMode.INFERENCE:
        return grad_in, None, None
    return grad_in, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# PReLU, pixel shuffle, nearest upsampling, L1

def prelu_forward(x: np.ndarray, slope: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    _check_channels(x, slope.shape[0], "prelu")
    neg = x < 0
    out = np.where(neg, x * slope[None, :, None, None], x)
    if tape is not None:
        tape.save(x=x, neg=neg)
    return out


def prelu_backward(grad_out: np.ndarray, tape: GradTape, slope: np.ndarray):
    """Return ``(grad_in, grad_slope)``."""
    saved = tape.load()
    x, neg = saved["x"], saved["neg"]
    grad_in = np.where(neg, grad_out * slope[None, :, None, None], grad_out)
    grad_slope = np.where(neg, grad_out * x, 0).sum(axis=(0, 2, 3)).astype(slope.dtype)
    return grad_in, grad_slope


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    oc = c // (r * r)
    return x.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def pixel_shuffle_backward(grad_out: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = grad_out.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_shuffle_backward: spatial dims {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    return grad_out.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def nearest_upsample(x: np.ndarray, r: int) -> np.ndarray:
    if r < 1:
        raise ValueError("upsampling factor must be >= 1")
    return x.repeat(r, axis=2).repeat(r, axis=3)


def nearest_upsample_backward(grad_out: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = grad_out.shape
    return grad_out.reshape(n, c, hr // r, r, wr // r, r).sum(axis=(3, 5))


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes differ {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean(dtype=np.float64))


def l1_loss_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes differ {pred.shape} vs {target.shape}")
    return (np.sign(pred - target) / pred.size).astype(pred.dtype)
