"""Collapse training-form RepSR blocks into single 3x3 convolutions.

All fusion arithmetic runs in float64 and is cast back to the source dtype at
the end, so an f32 model loses at most one rounding per fused tensor.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .block import BlockParams, BlockSpec, Residual
from .model import Form, Model, model_forward
from .nn import BnMode, BnParams, ConvParams, conv2d_forward
from .tensor import ShapeError, batched_matmul, make_rng, permute_reshape

DEFAULT_TOLERANCE = {np.dtype(np.float32): 1e-5, np.dtype(np.float64): 1e-10}


class BnModeError(RuntimeError):
    """A BN layer still uses mini-batch statistics and cannot be folded."""


class SpecMismatchError(ValueError):
    pass


def _require_population_stats(bn: BnParams) -> None:
    if bn.mode is BnMode.BATCH:
        raise BnModeError("BN layer is in Batch mode; freeze it before re-parameterizing")


def fold_bn_into_conv(conv: ConvParams, bn: BnParams) -> ConvParams:
    """Absorb a population-statistics BN into the convolution that feeds it."""
    if bn.channels != conv.out_channels:
        raise ShapeError(f"BN has {bn.channels} channels, conv produces {conv.out_channels}")
    _require_population_stats(bn)
    dtype = conv.weight.dtype
    scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    w = conv.weight.astype(np.float64) * scale[:, None, None, None]
    b = (conv.bias.astype(np.float64) - bn.running_mean) * scale + bn.beta
    return ConvParams(w.astype(dtype), b.astype(dtype))


def fuse_conv3x3_conv1x1(c3: ConvParams, c1: ConvParams) -> ConvParams:
    """Merge ``c1(c3(x))`` into one KxK convolution via a batched matmul over the K*K taps."""
    if c1.kernel_size != 1:
        raise ShapeError("second convolution must be 1x1")
    if c1.in_channels != c3.out_channels:
        raise ShapeError(f"1x1 conv expects {c1.in_channels} channels, KxK conv gives {c3.out_channels}")
    dtype = c3.weight.dtype
    cmid, cin, k, _ = c3.weight.shape
    cout = c1.out_channels
    w3 = permute_reshape(c3.weight.astype(np.float64), (2, 3, 0, 1), (k * k, cmid, cin))
    w1 = permute_reshape(c1.weight.astype(np.float64), None, (1, cout, cmid))
    merged = batched_matmul(w1, w3)  # (K*K, Cout, Cin); w1 broadcast over taps
    weight = permute_reshape(merged.reshape(k, k, cout, cin), (2, 3, 0, 1), (cout, cin, k, k))
    bias = w1[0] @ c3.bias.astype(np.float64) + c1.bias
    return ConvParams(weight.astype(dtype), bias.astype(dtype))


def add_identity_to_kernel(weight: np.ndarray) -> np.ndarray:
    """Return a copy of a KxK weight with the residual identity added at the centre taps."""
    cout, cin, k, _ = weight.shape
    if cout != cin:
        raise ShapeError(f"identity needs a square kernel, got {cout}x{cin}")
    out = weight.copy()
    c = k // 2
    idx = np.arange(cout)
    out[idx, idx, c, c] += 1
    return out


def diagonal_kernel(scale: np.ndarray, shift: np.ndarray, k: int = 3) -> ConvParams:
    """Per-channel affine map ``x*scale + shift`` written as a KxK convolution."""
    c = scale.shape[0]
    w = np.zeros((c, c, k, k), dtype=scale.dtype)
    idx = np.arange(c)
    w[idx, idx, k // 2, k // 2] = scale
    return ConvParams(w, shift.copy())


def collapse_block(p: BlockParams, spec: BlockSpec) -> ConvParams:
    """Fold, fuse and sum every path of a block into one 3x3 convolution."""
    for _, bn in p.bn_layers():
        _require_population_stats(bn)
    dtype = p.branches[0].conv3.weight.dtype
    c = spec.channels
    weight = np.zeros((c, c, 3, 3))
    bias = np.zeros(c)
    for br in p.branches:
        conv3 = fold_bn_into_conv(br.conv3.astype(np.float64), br.bn.astype(np.float64))
        fused = fuse_conv3x3_conv1x1(conv3, br.conv1.astype(np.float64))
        if br.bn_out is not None:
            fused = fold_bn_into_conv(fused, br.bn_out.astype(np.float64))
        weight += fused.weight
        bias += fused.bias
    if spec.residual is Residual.CLEAN:
        weight = add_identity_to_kernel(weight)
    elif spec.residual is Residual.WITH_BN:
        scale, shift = p.residual_bn.astype(np.float64).scale_shift()
        res = diagonal_kernel(scale, shift)
        weight += res.weight
        bias += res.bias
    return ConvParams(weight.astype(dtype), bias.astype(dtype))


def collapse_model(m: Model) -> Model:
    """Plain-form copy of ``m``; a plain model is returned unchanged."""
    if m.form is Form.PLAIN:
        return m
    body = [collapse_block(b, m.spec.block) for b in m.body]
    return replace(m, head=m.head.copy(), body=body, slopes=[s.copy() for s in m.slopes],
                   tail=m.tail.copy(), form=Form.PLAIN, provenance=dict(m.provenance))


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    passed: bool
    trials: int
    tolerance: float
    vacuous: bool = False


def verify_equivalence(train_form: Model, plain_form: Model, trials: int, rng: np.random.Generator | None = None,
                       tolerance: float | None = None, lr_size: tuple[int, int] = (16, 16)) -> EquivalenceReport:
    """Compare both forms on ``trials`` uniform [-1, 1] inputs."""
    if train_form.spec.to_dict() != plain_form.spec.to_dict():
        raise SpecMismatchError(f"specs differ: {train_form.spec} vs {plain_form.spec}")
    for _, bn in train_form.bn_layers():
        _require_population_stats(bn)
    if tolerance is None:
        tolerance = DEFAULT_TOLERANCE[np.dtype(train_form.dtype)]
    if trials <= 0:
        warnings.warn("verify_equivalence called with no trials; result is vacuous", stacklevel=2)
        return EquivalenceReport(0.0, True, 0, tolerance, vacuous=True)
    rng = rng if rng is not None else make_rng(0)
    worst = 0.0
    shape = (1, train_form.spec.colors, *lr_size)
    for _ in range(trials):
        x = rng.uniform(-1.0, 1.0, size=shape).astype(train_form.dtype)
        a = model_forward(train_form, x)
        b = model_forward(plain_form, x)
        worst = max(worst, float(np.max(np.abs(a.astype(np.float64) - b))))
    return EquivalenceReport(worst, worst <= tolerance, trials, tolerance)


@dataclass
class PaddingReport:
    interior_diff: float
    border_diff: float
    naive: ConvParams


def naive_fuse_conv1x1_conv3x3(c1: ConvParams, c3: ConvParams) -> ConvParams:
    """Fuse ``c3(c1(x))`` by ignoring that c3 zero-pads c1's output (wrong at the border)."""
    w1 = c1.weight[:, :, 0, 0].astype(np.float64)  # (Cmid, Cin)
    w3 = c3.weight.astype(np.float64)  # (Cout, Cmid, K, K)
    weight = np.einsum("omyx,mi->oiyx", w3, w1)
    bias = w3.sum(axis=(2, 3)) @ c1.bias + c3.bias
    dtype = c3.weight.dtype
    return ConvParams(weight.astype(dtype), bias.astype(dtype))


def demonstrate_padding_failure(c1: ConvParams, c3: ConvParams, x: np.ndarray | None = None,
                                rng: np.random.Generator | None = None, size: tuple[int, int] = (8, 8)) -> PaddingReport:
    """Measure how the 1x1-then-3x3 order breaks naive fusion at the one-pixel border."""
    if c1.kernel_size != 1 or c3.kernel_size != 3:
        raise ShapeError("expected a 1x1 conv followed by a 3x3 conv")
    if x is None:
        rng = rng if rng is not None else make_rng(0)
        x = rng.uniform(-1, 1, size=(1, c1.in_channels, *size)).astype(c1.weight.dtype)
    naive = naive_fuse_conv1x1_conv3x3(c1, c3)
    diff = np.abs(conv2d_forward(conv2d_forward(x, c1), c3).astype(np.float64) - conv2d_forward(x, naive))
    border = np.ones(diff.shape[2:], dtype=bool)
    border[1:-1, 1:-1] = False
    interior = diff[:, :, ~border]
    return PaddingReport(float(interior.max()) if interior.size else 0.0, float(diff[:, :, border].max()), naive)
