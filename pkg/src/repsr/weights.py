"""RPSR weight files.

Layout (all integers little-endian u32)::

    b"RPSR" | version | header_len | header (UTF-8 JSON)
    then per tensor: name_len | name | 4 dims | little-endian scalars

Vectors are stored with dims padded by trailing ones, e.g. ``(C, 1, 1, 1)``.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .model import Form, Model, ModelSpec, build_model, check_model
from .nn import BN_EPS, BN_MOMENTUM, PRELU_INIT, BnMode, ConvParams
from .tensor import RNG_ALGORITHM, as_dtype, make_rng

MAGIC = b"RPSR"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


class WeightFileError(Exception):
    exit_code = 1


class BadMagicError(WeightFileError):
    exit_code = 3


class VersionMismatchError(WeightFileError):
    exit_code = 4


class TruncatedError(WeightFileError):
    exit_code = 5

    def __init__(self, tensor: str, detail: str = ""):
        self.tensor = tensor
        super().__init__(f"file truncated while reading {tensor}" + (f" ({detail})" if detail else ""))


class DimMismatchError(WeightFileError):
    exit_code = 6


def _padded_dims(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise ValueError(f"cannot store rank-{len(shape)} tensor")
    return tuple(shape) + (1,) * (4 - len(shape))


def _header(m: Model) -> dict:
    bns = list(m.bn_layers())
    eps = bns[0][1].eps if bns else BN_EPS
    momentum = bns[0][1].momentum if bns else BN_MOMENTUM
    return {
        "spec": m.spec.to_dict(),
        "form": m.form.value,
        "precision": m.spec.precision,
        "bn": {"eps": eps, "momentum": momentum, "modes": {name: bn.mode.value for name, bn in bns}},
        "rng": RNG_ALGORITHM,
        "prelu_init": PRELU_INIT,
        "image_range": [0.0, 1.0],
        "provenance": m.provenance,
    }


def save_model(m: Model, path: str | Path) -> None:
    header = json.dumps(_header(m), sort_keys=True).encode("utf-8")
    scalar = np.dtype(as_dtype(m.spec.precision)).newbyteorder("<")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(FORMAT_VERSION))
    buf.write(_U32.pack(len(header)))
    buf.write(header)
    for name, arr, _ in m.named_tensors():
        raw = name.encode("utf-8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<4I", *_padded_dims(arr.shape)))
        buf.write(np.ascontiguousarray(arr, dtype=scalar).tobytes())
    Path(path).write_bytes(buf.getvalue())


def _skeleton(spec: ModelSpec, form: Form) -> Model:
    m = build_model(spec, make_rng(0))
    if form is Form.PLAIN:
        dtype = as_dtype(spec.precision)
        m.body = [ConvParams.zeros(spec.channels, spec.channels, 3, dtype) for _ in range(spec.m_blocks)]
        m.form = Form.PLAIN
    return m


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, tensor: str, part: str = "data") -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(tensor, f"{part}: need {n} bytes, {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, tensor: str, part: str) -> int:
        return _U32.unpack(self.take(4, tensor, part))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def read_header(path: str | Path) -> dict:
    return _read_header(_Reader(Path(path).read_bytes()))


def _read_header(r: _Reader) -> dict:
    if len(r.data) < 4 or r.data[:4] != MAGIC:
        raise BadMagicError(f"not an RPSR weight file (magic {r.data[:4]!r})")
    r.pos = 4
    version = r.u32("<header>", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    size = r.u32("<header>", "length")
    try:
        return json.loads(r.take(size, "<header>", "json").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"corrupt header: {exc}") from None


def load_model(path: str | Path) -> Model:
    """Read a weight file; raises a :class:`WeightFileError` subclass on any defect."""
    r = _Reader(Path(path).read_bytes())
    header = _read_header(r)
    try:
        spec = ModelSpec.from_dict(header["spec"])
        form = Form(header["form"])
        bn_info = header["bn"]
    except (KeyError, ValueError, TypeError) as exc:
        raise WeightFileError(f"invalid header: {exc}") from None
    m = _skeleton(spec, form)
    scalar = np.dtype(as_dtype(spec.precision)).newbyteorder("<")
    expected = {name: arr for name, arr, _ in m.named_tensors()}
    seen: set[str] = set()
    for name in expected:
        if r.exhausted:
            raise TruncatedError(name, "tensor missing")
        raw_name = r.take(r.u32(name, "name length"), name, "name").decode("utf-8", "replace")
        if raw_name not in expected or raw_name in seen:
            raise WeightFileError(f"unexpected tensor {raw_name!r}")
        seen.add(raw_name)
        dims = struct.unpack("<4I", r.take(16, raw_name, "dims"))
        target = expected[raw_name]
        if dims != _padded_dims(target.shape):
            raise DimMismatchError(f"{raw_name}: file dims {dims}, spec requires {_padded_dims(target.shape)}")
        data = r.take(target.size * scalar.itemsize, raw_name)
        target[...] = np.frombuffer(data, dtype=scalar).reshape(target.shape)
    if not r.exhausted:
        raise WeightFileError(f"{len(r.data) - r.pos} trailing bytes after last tensor")
    modes = bn_info.get("modes", {})
    for name, bn in m.bn_layers():
        bn.eps = float(bn_info["eps"])
        bn.momentum = float(bn_info["momentum"])
        bn.mode = BnMode(modes.get(name, BnMode.BATCH))
    m.provenance = dict(header.get("provenance", {}))
    check_model(m)
    return m
