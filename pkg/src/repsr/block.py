"""Training-form RepSR block: clean residual plus N expand-and-squeeze branches."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .nn import (BnMode, BnParams, ConvParams, GradTape, batchnorm_backward, batchnorm_forward,
                 conv2d_backward, conv2d_forward)
from .tensor import ShapeError, seeded_normal

BnHook = Callable[[str, BnParams, np.ndarray], None]


class Residual(str, enum.Enum):
    CLEAN = "clean"
    WITH_BN = "with_bn"
    NONE = "none"


class BnPlacement(str, enum.Enum):
    MID_ONLY = "mid_only"  # C3-BN-C1
    AFTER_EACH = "after_each"  # C3-BN-C1-BN


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    width_multiplier: int = 2
    num_branches: int = 2
    residual: Residual = Residual.CLEAN
    bn_placement: BnPlacement = BnPlacement.MID_ONLY

    def __post_init__(self):
        object.__setattr__(self, "residual", Residual(self.residual))
        object.__setattr__(self, "bn_placement", BnPlacement(self.bn_placement))
        if self.channels < 1 or self.width_multiplier < 1 or self.num_branches < 1:
            raise ValueError(f"invalid block spec {self}")

    @property
    def mid_channels(self) -> int:
        return self.channels * self.width_multiplier


@dataclass
class Branch:
    conv3: ConvParams
    bn: BnParams
    conv1: ConvParams
    bn_out: BnParams | None = None


@dataclass
class BlockParams:
    branches: list[Branch]
    residual_bn: BnParams | None = None

    def bn_layers(self) -> Iterator[tuple[str, BnParams]]:
        for i, br in enumerate(self.branches):
            yield f"branch{i}.bn", br.bn
            if br.bn_out is not None:
                yield f"branch{i}.bn_out", br.bn_out
        if self.residual_bn is not None:
            yield "residual_bn", self.residual_bn

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray, bool]]:
        """Yield ``(name, array, trainable)``; arrays are the live parameter buffers."""
        for i, br in enumerate(self.branches):
            for cname, conv in (("conv3", br.conv3), ("conv1", br.conv1)):
                yield f"branch{i}.{cname}.weight", conv.weight, True
                yield f"branch{i}.{cname}.bias", conv.bias, True
        for name, bn in self.bn_layers():
            yield from _bn_tensors(name, bn)

    def copy(self) -> "BlockParams":
        return BlockParams(
            [Branch(b.conv3.copy(), b.bn.copy(), b.conv1.copy(), b.bn_out.copy() if b.bn_out else None)
             for b in self.branches],
            self.residual_bn.copy() if self.residual_bn else None)

    def astype(self, dtype) -> "BlockParams":
        return BlockParams(
            [Branch(b.conv3.astype(dtype), b.bn.astype(dtype), b.conv1.astype(dtype),
                    b.bn_out.astype(dtype) if b.bn_out else None) for b in self.branches],
            self.residual_bn.astype(dtype) if self.residual_bn else None)


def _bn_tensors(name: str, bn: BnParams):
    yield f"{name}.gamma", bn.gamma, True
    yield f"{name}.beta", bn.beta, True
    yield f"{name}.running_mean", bn.running_mean, False
    yield f"{name}.running_var", bn.running_var, False


def he_conv(cout: int, cin: int, k: int, rng: np.random.Generator, dtype=np.float32) -> ConvParams:
    std = math.sqrt(2.0 / (cin * k * k))
    return ConvParams(seeded_normal((cout, cin, k, k), 0.0, std, rng, dtype), np.zeros(cout, dtype))


def build_block(spec: BlockSpec, rng: np.random.Generator, dtype=np.float32) -> BlockParams:
    c, mid = spec.channels, spec.mid_channels
    after_each = spec.bn_placement is BnPlacement.AFTER_EACH
    branches = [
        Branch(conv3=he_conv(mid, c, 3, rng, dtype),
               bn=BnParams.fresh(mid, dtype),
               conv1=he_conv(c, mid, 1, rng, dtype),
               bn_out=BnParams.fresh(c, dtype) if after_each else None)
        for _ in range(spec.num_branches)
    ]
    residual_bn = BnParams.fresh(c, dtype) if spec.residual is Residual.WITH_BN else None
    return BlockParams(branches, residual_bn)


def check_block(p: BlockParams, spec: BlockSpec) -> None:
    if len(p.branches) != spec.num_branches:
        raise ShapeError(f"block has {len(p.branches)} branches, spec says {spec.num_branches}")
    for br in p.branches:
        if br.conv3.weight.shape != (spec.mid_channels, spec.channels, 3, 3):
            raise ShapeError(f"conv3 weight shape {br.conv3.weight.shape} does not match spec")
        if br.conv1.weight.shape != (spec.channels, spec.mid_channels, 1, 1):
            raise ShapeError(f"conv1 weight shape {br.conv1.weight.shape} does not match spec")
    if (p.residual_bn is not None) != (spec.residual is Residual.WITH_BN):
        raise ShapeError("residual BN presence does not match spec")


def trainable_param_count(spec: BlockSpec) -> int:
    c, mid = spec.channels, spec.mid_channels
    per_branch = (mid * c * 9 + mid) + 2 * mid + (c * mid + c)
    if spec.bn_placement is BnPlacement.AFTER_EACH:
        per_branch += 2 * c
    extra = 2 * c if spec.residual is Residual.WITH_BN else 0
    return spec.num_branches * per_branch + extra


def block_forward(x: np.ndarray, p: BlockParams, spec: BlockSpec, tape: GradTape | None = None,
                  bn_mode: BnMode | None = None, bn_hook: BnHook | None = None) -> np.ndarray:
    """Residual term plus the sum of all branches.

    ``bn_mode`` overrides every BN layer's own mode for this call; ``bn_hook`` is
    called with ``(name, bn, bn_input)`` before each BN layer.
    """
    if x.ndim != 4 or x.shape[1] != spec.channels:
        raise ShapeError(f"block expects {spec.channels} channels, got shape {x.shape}")

    def bn(name, params, t, sub):
        if bn_hook is not None:
            bn_hook(name, params, t)
        return batchnorm_forward(t, params, sub, bn_mode)

    def new():
        return GradTape() if tape is not None else None

    tapes = []
    if spec.residual is Residual.CLEAN:
        out = x.copy()
    elif spec.residual is Residual.WITH_BN:
        rt = new()
        out = bn("residual_bn", p.residual_bn, x, rt)
        tapes.append(rt)
    else:
        out = np.zeros_like(x)
    branch_tapes = []
    for i, br in enumerate(p.branches):
        t3, tb, t1, to = new(), new(), new(), new()
        y = conv2d_forward(x, br.conv3, t3)
        y = bn(f"branch{i}.bn", br.bn, y, tb)
        y = conv2d_forward(y, br.conv1, t1)
        if br.bn_out is not None:
            y = bn(f"branch{i}.bn_out", br.bn_out, y, to)
        out += y
        branch_tapes.append((t3, tb, t1, to))
    if tape is not None:
        tape.save(branches=branch_tapes, residual=tapes)
    return out


def block_backward(grad_out: np.ndarray, tape: GradTape, p: BlockParams,
                   spec: BlockSpec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Return ``(grad_in, grads)`` with ``grads`` keyed like :meth:`BlockParams.named_tensors`.

    BN affine gradients are omitted for layers run in Inference mode.
    """
    saved = tape.load()
    grads: dict[str, np.ndarray] = {}
    if spec.residual is Residual.CLEAN:
        grad_in = grad_out.copy()
    elif spec.residual is Residual.WITH_BN:
        grad_in, gg, gb = batchnorm_backward(grad_out, saved["residual"][0], p.residual_bn)
        if gg is not None:
            grads["residual_bn.gamma"], grads["residual_bn.beta"] = gg, gb
    else:
        grad_in = np.zeros_like(grad_out)
    for i, (br, (t3, tb, t1, to)) in enumerate(zip(p.branches, saved["branches"])):
        g = grad_out
        if br.bn_out is not None:
            g, gg, gb = batchnorm_backward(g, to, br.bn_out)
            if gg is not None:
                grads[f"branch{i}.bn_out.gamma"], grads[f"branch{i}.bn_out.beta"] = gg, gb
        g, grads[f"branch{i}.conv1.weight"], grads[f"branch{i}.conv1.bias"] = conv2d_backward(g, t1, br.conv1)
        g, gg, gb = batchnorm_backward(g, tb, br.bn)
        if gg is not None:
            grads[f"branch{i}.bn.gamma"], grads[f"branch{i}.bn.beta"] = gg, gb
        g, grads[f"branch{i}.conv3.weight"], grads[f"branch{i}.conv3.bias"] = conv2d_backward(g, t3, br.conv3)
        grad_in += g
    return grad_in, grads
