"""Evaluation metrics and BN analysis instruments (statistics traces, patch pasting)."""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

from .imaging import rgb_to_ycbcr, write_png
from .model import model_forward
from .nn import BnMode
from .tensor import ShapeError

TRACE_HEADER = ("layer_index", "mean_l1_inst", "var_l1_inst", "mean_l1_pop", "var_l1_pop")


class NoBnLayersError(ValueError):
    pass


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma on the 0-255 scale from RGB in [0, 1]; keeps a singleton channel axis."""
    return rgb_to_ycbcr(img)[..., :1, :, :]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0, crop_border: int = 0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    if crop_border:
        a = a[..., crop_border:-crop_border, crop_border:-crop_border]
        b = b[..., crop_border:-crop_border, crop_border:-crop_border]
    mse = np.mean(np.square(a.astype(np.float64) - b.astype(np.float64)))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


@dataclass
class StatsRecord:
    layer_index: int
    mean_l1_inst: float
    var_l1_inst: float
    mean_l1_pop: float
    var_l1_pop: float
    name: str = ""


def bn_stats_trace(model, x: np.ndarray, bn_mode: BnMode = BnMode.INFERENCE) -> list[StatsRecord]:
    """Per-BN-layer L1 norms of instance statistics of ``x`` next to the stored population ones.

    Instance mean/variance are taken over (h, w) per sample and channel and then
    averaged over the batch. The forward pass uses population statistics.
    """
    if not any(True for _ in model.bn_layers()):
        raise NoBnLayersError("model has no BN layers")
    records: list[StatsRecord] = []

    def hook(name, bn, inp):
        inp = inp.astype(np.float64)
        mean = inp.mean(axis=(2, 3)).mean(axis=0)
        var = inp.var(axis=(2, 3)).mean(axis=0)
        records.append(StatsRecord(len(records), float(np.abs(mean).sum()), float(np.abs(var).sum()),
                                   float(np.abs(bn.running_mean).sum()), float(np.abs(bn.running_var).sum()), name))

    model_forward(model, x, bn_mode=bn_mode, bn_hook=hook)
    return records


def write_trace_csv(path: str | Path, trace: list[StatsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in trace:
            w.writerow([r.layer_index, *(f"{v:.9g}" for v in astuple(r)[1:5])])


def paste_patch(base: np.ndarray, patch: np.ndarray, top_left: tuple[int, int]) -> np.ndarray:
    """Copy of ``base`` with ``patch`` written at ``top_left`` over the last two axes."""
    y, x = top_left
    ph, pw = patch.shape[-2:]
    h, w = base.shape[-2:]
    if base.shape[:-2] != patch.shape[:-2]:
        raise ShapeError(f"patch leading dims {patch.shape[:-2]} differ from base {base.shape[:-2]}")
    if y < 0 or x < 0 or y + ph > h or x + pw > w:
        raise ValueError(f"patch {ph}x{pw} at {top_left} does not fit in {h}x{w}")
    out = base.copy()
    out[..., y:y + ph, x:x + pw] = patch
    return out


def receptive_radius(model) -> int:
    """LR-pixel radius of the network's receptive field (every spatial conv is 3x3)."""
    return model.spec.m_blocks + 2


@dataclass
class PasteResult:
    composite: np.ndarray
    output_base: np.ndarray
    output_pasted: np.ndarray
    diff: np.ndarray  # |output_pasted - output_base|, same shape as the SR output

    @property
    def heatmap(self) -> np.ndarray:
        """Per-pixel (h, w) maximum over batch and channels."""
        return self.diff.max(axis=(0, 1))

    def stats(self) -> dict[str, float]:
        d = self.diff
        return {"max": float(d.max()), "mean": float(d.mean()),
                "nonzero_fraction": float(np.count_nonzero(self.heatmap) / self.heatmap.size)}


def paste_experiment(model, base: np.ndarray, patch: np.ndarray, top_left: tuple[int, int],
                     bn_mode: BnMode = BnMode.INFERENCE) -> PasteResult:
    """Super-resolve ``base`` with and without ``patch`` pasted in and diff the outputs."""
    composite = paste_patch(base, patch, top_left)
    a = model_forward(model, base, bn_mode=bn_mode)
    b = model_forward(model, composite, bn_mode=bn_mode)
    return PasteResult(composite, a, b, np.abs(b.astype(np.float64) - a))


def write_heatmap_png(path: str | Path, heatmap: np.ndarray) -> None:
    peak = float(heatmap.max())
    scaled = heatmap / peak if peak > 0 else np.zeros_like(heatmap)
    write_png(path, scaled[None])
