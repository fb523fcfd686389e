"""Image utilities: MATLAB-compatible bicubic resize, BT.601 YCbCr, 8-bit PNG I/O."""
from __future__ import annotations

import functools
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ShapeError

CUBIC_A = -0.5

_RGB_TO_YCBCR = np.array([[65.481, 128.553, 24.966],
                          [-37.797, -74.203, 112.0],
                          [112.0, -93.786, -18.214]])
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0])


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@functools.lru_cache(maxsize=64)
def resize_matrix(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """(out_len, in_len) interpolation matrix with symmetric boundary handling."""
    if in_len <= 0 or out_len <= 0:
        raise ValueError("resize lengths must be positive")
    scale = out_len / in_len
    if scale < 1 and antialias:
        width = 4.0 / scale

        def kernel(t):
            return scale * cubic(scale * t)
    else:
        width = 4.0
        kernel = cubic
    u = np.arange(1, out_len + 1) / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]  # 1-based source positions
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    mat = np.zeros((out_len, in_len))
    np.add.at(mat, (np.repeat(np.arange(out_len), taps), src.ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def bicubic_resize(img: np.ndarray, out_size: tuple[int, int], antialias: bool = True) -> np.ndarray:
    """Resize the last two axes of ``img`` to ``out_size`` = (h, w)."""
    oh, ow = (int(v) for v in out_size)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"target size must be positive, got {out_size}")
    h, w = img.shape[-2:]
    if (h, w) == (oh, ow):
        return img.copy()
    rows = resize_matrix(h, oh, antialias)
    cols = resize_matrix(w, ow, antialias)
    out = np.matmul(np.matmul(rows, img.astype(np.float64)), cols.T)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    """(..., 3, h, w) RGB in [0, 1] -> YCbCr on the 0-255 scale."""
    if img.shape[-3] != 3:
        raise ShapeError(f"expected 3 colour channels, got {img.shape[-3]}")
    out = np.einsum("ij,...jhw->...ihw", _RGB_TO_YCBCR, img.astype(np.float64))
    return out + _YCBCR_OFFSET[:, None, None]


def ycbcr_to_rgb(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_ycbcr`; returns RGB in [0, 1] (unclipped)."""
    inv = np.linalg.inv(_RGB_TO_YCBCR)
    return np.einsum("ij,...jhw->...ihw", inv, img.astype(np.float64) - _YCBCR_OFFSET[:, None, None])


def read_png(path: str | Path, colors: int | None = None) -> np.ndarray:
    """Load an 8-bit image as a float (1, c, h, w) array in [0, 1].

    ``colors=1`` converts RGB input to the BT.601 luma channel; ``colors=3``
    replicates gray input to three channels.
    """
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    if colors == 1 and arr.shape[0] == 3:
        arr = rgb_to_ycbcr(arr)[:1] / 255.0
    elif colors == 3 and arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return arr[None]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Write a (c, h, w) or (1, c, h, w) float image in [0, 1] as 8-bit PNG."""
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ShapeError("write_png takes a single image")
        img = img[0]
    if img.shape[0] not in (1, 3):
        raise ShapeError(f"cannot write {img.shape[0]}-channel image")
    data = to_uint8(img)
    data = data[0] if data.shape[0] == 1 else data.transpose(1, 2, 0)
    Image.fromarray(data).save(path, format="PNG")
