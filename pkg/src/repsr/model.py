"""VGG-style SR network: head conv, M body layers, tail conv, pixel shuffle, nearest skip."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .block import (BlockParams, BlockSpec, BnHook, BnPlacement, Residual, block_backward, block_forward,
                    build_block, check_block, he_conv, trainable_param_count)
from .nn import (PRELU_INIT, BnMode, BnParams, ConvParams, GradTape, conv2d_backward, conv2d_forward,
                 nearest_upsample, pixel_shuffle, pixel_shuffle_backward, prelu_backward, prelu_forward)
from .tensor import ShapeError, as_dtype, dtype_name

_SPEC_RE = re.compile(r"^M(\d+)C(\d+)(?:[x×](\d+))?$", re.IGNORECASE)

#: Published reference rows with colors=1, x4: label -> (spec, params in K, FLOPs in G).
REFERENCE_ROWS = {
    "A4": ("M4C8", 3.70, 0.21),
    "B3": ("M4C16", 11.90, 0.69),
    "C4": ("M10C16", 26.00, 1.50),
    "D4": ("M10C32", 98.10, 5.65),
    "E4": ("M16C64", 602.90, 34.73),
}


class Form(str, enum.Enum):
    TRAINING = "training"
    PLAIN = "plain"


@dataclass(frozen=True)
class ModelSpec:
    m_blocks: int
    channels: int
    scale: int = 4
    colors: int = 1
    block: BlockSpec | None = None
    precision: str = "f32"

    def __post_init__(self):
        if self.block is None:
            object.__setattr__(self, "block", BlockSpec(self.channels))
        if self.block.channels != self.channels:
            raise ValueError("block channel count must equal model channel count")
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.colors not in (1, 3):
            raise ValueError(f"colors must be 1 or 3, got {self.colors}")
        if self.m_blocks < 0:
            raise ValueError("m_blocks must be non-negative")
        as_dtype(self.precision)

    @classmethod
    def parse(cls, text: str, *, scale: int | None = None, colors: int = 1, width_multiplier: int = 2,
              num_branches: int = 2, residual: Residual | str = Residual.CLEAN,
              bn_placement: BnPlacement | str = BnPlacement.MID_ONLY, precision: str = "f32") -> "ModelSpec":
        """Parse ``"M4C16"`` or ``"M4C16x4"``; an explicit ``scale`` wins over the suffix."""
        m = _SPEC_RE.match(text.strip())
        if not m:
            raise ValueError(f"cannot parse model spec {text!r}; expected e.g. M4C16x4")
        blocks, ch = int(m.group(1)), int(m.group(2))
        if scale is None:
            scale = int(m.group(3)) if m.group(3) else 4
        block = BlockSpec(ch, width_multiplier, num_branches, Residual(residual), BnPlacement(bn_placement))
        return cls(blocks, ch, scale, colors, block, precision)

    @property
    def name(self) -> str:
        return f"M{self.m_blocks}C{self.channels}x{self.scale}"

    @property
    def tail_channels(self) -> int:
        return self.colors * self.scale ** 2

    def to_dict(self) -> dict:
        b = self.block
        return {"m_blocks": self.m_blocks, "channels": self.channels, "scale": self.scale,
                "colors": self.colors, "precision": self.precision,
                "block": {"width_multiplier": b.width_multiplier, "num_branches": b.num_branches,
                          "residual": b.residual.value, "bn_placement": b.bn_placement.value}}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        b = d["block"]
        block = BlockSpec(d["channels"], b["width_multiplier"], b["num_branches"], b["residual"], b["bn_placement"])
        return cls(d["m_blocks"], d["channels"], d["scale"], d["colors"], block, d["precision"])


@dataclass
class Model:
    spec: ModelSpec
    head: ConvParams
    body: list  # BlockParams (training form) or ConvParams (plain form)
    slopes: list[np.ndarray]  # PReLU slopes: head, then one per body layer
    tail: ConvParams
    form: Form = Form.TRAINING
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.form = Form(self.form)
        if len(self.body) != self.spec.m_blocks or len(self.slopes) != self.spec.m_blocks + 1:
            raise ShapeError("body/activation count does not match spec")

    @property
    def dtype(self) -> np.dtype:
        return self.head.weight.dtype

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray, bool]]:
        """Yield ``(name, array, trainable)`` in a fixed order; arrays are live buffers."""
        yield "head.weight", self.head.weight, True
        yield "head.bias", self.head.bias, True
        yield "act0.slope", self.slopes[0], True
        for i, layer in enumerate(self.body):
            if isinstance(layer, BlockParams):
                for name, arr, trainable in layer.named_tensors():
                    yield f"body{i}.{name}", arr, trainable
            else:
                yield f"body{i}.weight", layer.weight, True
                yield f"body{i}.bias", layer.bias, True
            yield f"act{i + 1}.slope", self.slopes[i + 1], True
        yield "tail.weight", self.tail.weight, True
        yield "tail.bias", self.tail.bias, True

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: arr for name, arr, t in self.named_tensors() if t}

    def bn_layers(self) -> Iterator[tuple[str, BnParams]]:
        for i, layer in enumerate(self.body):
            if isinstance(layer, BlockParams):
                for name, bn in layer.bn_layers():
                    yield f"body{i}.{name}", bn

    def num_trainable(self) -> int:
        return sum(arr.size for _, arr, t in self.named_tensors() if t)

    def copy(self) -> "Model":
        return replace(self, head=self.head.copy(), body=[b.copy() for b in self.body],
                       slopes=[s.copy() for s in self.slopes], tail=self.tail.copy(),
                       provenance=dict(self.provenance))

    def astype(self, dtype) -> "Model":
        dtype = as_dtype(dtype)
        return replace(self, spec=replace(self.spec, precision=dtype_name(dtype)),
                       head=self.head.astype(dtype), body=[b.astype(dtype) for b in self.body],
                       slopes=[s.astype(dtype) for s in self.slopes], tail=self.tail.astype(dtype),
                       provenance=dict(self.provenance))


def build_model(spec: ModelSpec, rng: np.random.Generator, tail_scale: float = 0.1) -> Model:
    """Training-form model with He-initialized convs; ``tail_scale`` shrinks the tail weights."""
    dtype = as_dtype(spec.precision)
    head = he_conv(spec.channels, spec.colors, 3, rng, dtype)
    body = [build_block(spec.block, rng, dtype) for _ in range(spec.m_blocks)]
    tail = he_conv(spec.tail_channels, spec.channels, 3, rng, dtype)
    tail.weight *= dtype.type(tail_scale)
    slopes = [np.full(spec.channels, PRELU_INIT, dtype) for _ in range(spec.m_blocks + 1)]
    return Model(spec, head, body, slopes, tail, Form.TRAINING)


def check_model(m: Model) -> None:
    """Validate every tensor shape against ``m.spec``."""
    s = m.spec
    if m.head.weight.shape != (s.channels, s.colors, 3, 3):
        raise ShapeError(f"head weight {m.head.weight.shape} does not match spec")
    if m.tail.weight.shape != (s.tail_channels, s.channels, 3, 3):
        raise ShapeError(f"tail weight {m.tail.weight.shape} does not match spec")
    for sl in m.slopes:
        if sl.shape != (s.channels,):
            raise ShapeError("PReLU slope length does not match channels")
    for layer in m.body:
        if m.form is Form.TRAINING:
            check_block(layer, s.block)
        elif layer.weight.shape != (s.channels, s.channels, 3, 3):
            raise ShapeError(f"plain body weight {layer.weight.shape} does not match spec")


def model_forward(m: Model, x: np.ndarray, tape: GradTape | None = None, bn_mode: BnMode | None = None,
                  bn_hook: BnHook | None = None) -> np.ndarray:
    """pixel_shuffle(tail(body(act(head(x))))) + nearest_upsample(x)."""
    s = m.spec
    if x.ndim != 4 or x.shape[1] != s.colors:
        raise ShapeError(f"model expects (n, {s.colors}, h, w) input, got {x.shape}")
    x = x.astype(m.dtype, copy=False)
    record = tape is not None
    tapes = []

    def t():
        tp = GradTape() if record else None
        tapes.append(tp)
        return tp

    h = conv2d_forward(x, m.head, t())
    h = prelu_forward(h, m.slopes[0], t())
    for i, layer in enumerate(m.body):
        if isinstance(layer, BlockParams):
            hook = None
            if bn_hook is not None:
                def hook(name, bn, inp, _i=i):
                    bn_hook(f"body{_i}.{name}", bn, inp)
            h = block_forward(h, layer, s.block, t(), bn_mode, hook)
        else:
            h = conv2d_forward(h, layer, t())
        h = prelu_forward(h, m.slopes[i + 1], t())
    h = conv2d_forward(h, m.tail, t())
    out = pixel_shuffle(h, s.scale) + nearest_upsample(x, s.scale)
    if record:
        tape.save(tapes=tapes)
    return out


def model_backward(grad_out: np.ndarray, tape: GradTape, m: Model) -> dict[str, np.ndarray]:
    """Gradients of every trainable tensor touched by the recorded forward.

    The gradient wrt the input image is returned under the key ``"input"``.
    """
    tapes = list(tape.load()["tapes"])
    s = m.spec
    grads: dict[str, np.ndarray] = {}
    g = pixel_shuffle_backward(grad_out, s.scale)
    g, grads["tail.weight"], grads["tail.bias"] = conv2d_backward(g, tapes.pop(), m.tail)
    for i in reversed(range(s.m_blocks)):
        g, grads[f"act{i + 1}.slope"] = prelu_backward(g, tapes.pop(), m.slopes[i + 1])
        layer = m.body[i]
        if isinstance(layer, BlockParams):
            g, sub = block_backward(g, tapes.pop(), layer, s.block)
            grads.update({f"body{i}.{k}": v for k, v in sub.items()})
        else:
            g, grads[f"body{i}.weight"], grads[f"body{i}.bias"] = conv2d_backward(g, tapes.pop(), layer)
    g, grads["act0.slope"] = prelu_backward(g, tapes.pop(), m.slopes[0])
    g, grads["head.weight"], grads["head.bias"] = conv2d_backward(g, tapes.pop(), m.head)
    skip = grad_out.reshape(*g.shape[:2], g.shape[2], s.scale, g.shape[3], s.scale).sum(axis=(3, 5))
    grads["input"] = g + skip
    return grads


@dataclass(frozen=True)
class Cost:
    params: int
    macs: int

    @property
    def params_k(self) -> float:
        return self.params / 1e3

    @property
    def macs_g(self) -> float:
        return self.macs / 1e9


def count_params_flops(spec: ModelSpec, form: Form | str = Form.PLAIN,
                       lr_size: tuple[int, int] = (180, 320)) -> Cost:
    """Trainable parameters and multiply-accumulates at LR resolution ``(h, w)``.

    Each conv costs ``Cout * (Cin*K*K + 1)`` MACs per pixel: the weight taps plus the
    bias accumulation. BN and PReLU are not counted.
    """
    form = Form(form)
    hw = lr_size[0] * lr_size[1]
    c, b = spec.channels, spec.block
    convs = [(c, spec.colors, 3), (spec.tail_channels, c, 3)]
    params = 0
    if form is Form.PLAIN:
        convs += [(c, c, 3)] * spec.m_blocks
    else:
        branch = [(b.mid_channels, c, 3), (c, b.mid_channels, 1)]
        convs += branch * (b.num_branches * spec.m_blocks)
        conv_params = sum(co * (ci * k * k + 1) for co, ci, k in branch) * b.num_branches
        params += (trainable_param_count(b) - conv_params) * spec.m_blocks  # BN affine terms
    params += sum(co * (ci * k * k + 1) for co, ci, k in convs)
    params += c * (spec.m_blocks + 1)  # PReLU slopes
    macs = sum(co * (ci * k * k + 1) for co, ci, k in convs) * hw
    return Cost(params, macs)


def calibrate_bn_stats(m: Model, x: np.ndarray, mode: BnMode = BnMode.INFERENCE) -> None:
    """Set every BN layer's population statistics to the batch statistics of ``x``.

    Runs one Batch-mode forward with momentum 1, then leaves the layers in ``mode``.
    """
    layers = [bn for _, bn in m.bn_layers()]
    saved = [bn.momentum for bn in layers]
    try:
        for bn in layers:
            bn.momentum = 1.0
        model_forward(m, x, bn_mode=BnMode.BATCH)
    finally:
        for bn, mom in zip(layers, saved):
            bn.momentum = mom
    for bn in layers:
        bn.mode = BnMode(mode)
