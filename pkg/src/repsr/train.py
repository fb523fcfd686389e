"""Desk-scale trainer: patch sampling, Adam, LR schedules and the late BN freeze."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diagnostics import psnr, rgb_to_y
from .imaging import bicubic_resize, read_png
from .model import Model, model_backward, model_forward
from .nn import BnMode, GradTape, l1_loss, l1_loss_backward
from .tensor import ShapeError, make_rng

log = logging.getLogger(__name__)

SCHEDULES = ("multistep", "cosine")


class ImageTooSmallError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, loss: float, dump_path: Path | None):
        self.iteration, self.loss, self.dump_path = iteration, loss, dump_path
        where = f"; diagnostics written to {dump_path}" if dump_path else ""
        super().__init__(f"non-finite loss {loss} at iteration {iteration}{where}")


@dataclass
class TrainConfig:
    total_iters: int = 1000
    batch_size: int = 32
    patch_size: int = 64  # LR pixels
    lr0: float = 4e-4
    schedule: str = "multistep"
    milestones: tuple[int, ...] | None = None  # default: 50% and 75% of total_iters
    gamma: float = 0.5
    cycles: int = 4
    lr_min: float = 1e-7
    freeze_fraction: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_interval: int = 100
    augment: bool = False

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not 0 < self.freeze_fraction < 1:
            raise ValueError("freeze_fraction must lie in (0, 1)")
        if self.milestones is not None:
            self.milestones = tuple(int(m) for m in self.milestones)

    @property
    def freeze_iter(self) -> int:
        """First iteration that runs on population statistics (always < total_iters)."""
        return min(self.total_iters - 1, math.floor((1 - self.freeze_fraction) * self.total_iters + 0.5))

    @property
    def effective_milestones(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return self.milestones
        return (round(0.5 * self.total_iters), round(0.75 * self.total_iters))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.effective_milestones)
        d["freeze_iter"] = self.freeze_iter
        return d


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    if cfg.schedule == "multistep":
        k = sum(iteration >= m for m in cfg.effective_milestones)
        return cfg.lr0 * cfg.gamma ** k
    bounds = [round(k * cfg.total_iters / cfg.cycles) for k in range(cfg.cycles + 1)]
    for start, end in zip(bounds, bounds[1:]):
        if start <= iteration < end:
            t, period = iteration - start, end - start
            return cfg.lr_min + (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * t / period)) / 2
    raise AssertionError("unreachable")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place.

    Parameters without an entry in ``grads`` are left untouched.
    """
    state.step += 1
    c1 = 1 - beta1 ** state.step
    c2 = 1 - beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros_like(p, dtype=np.float64))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g, dtype=np.float64)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


def freeze_bn(m: Model) -> Model:
    """Switch every BN layer to Frozen mode; running stats stay latched from here on."""
    layers = [bn for _, bn in m.bn_layers()]
    if layers and all(bn.mode is BnMode.FROZEN for bn in layers):
        warnings.warn("BN layers are already frozen", stacklevel=2)
    for bn in layers:
        bn.mode = BnMode.FROZEN
    return m


# ---------------------------------------------------------------------------
# data

def smoke_dataset_dir() -> Path:
    return Path(str(resources.files("repsr") / "data" / "smoke"))


def load_images(source: str | Path, colors: int) -> list[np.ndarray]:
    """Load every PNG in a directory as (colors, h, w) float arrays; ``"smoke"`` picks the bundled set."""
    folder = smoke_dataset_dir() if str(source) == "smoke" else Path(source)
    files = sorted(folder.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images in {folder}")
    return [read_png(f, colors)[0] for f in files]


def _augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        patch = patch[..., ::-1]
    if rng.random() < 0.5:
        patch = patch[..., ::-1, :]
    if rng.random() < 0.5:
        patch = patch.swapaxes(-1, -2)
    return patch


def sample_patch_batch(images: Sequence[np.ndarray], cfg: TrainConfig, scale: int, rng: np.random.Generator,
                       dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Random aligned (LR, HR) patches; each LR patch is the bicubic downscale of its HR patch."""
    hp = cfg.patch_size * scale
    for i, img in enumerate(images):
        if img.shape[-2] < hp or img.shape[-1] < hp:
            raise ImageTooSmallError(f"image {i} is {img.shape[-2]}x{img.shape[-1]}, need at least {hp}x{hp}")
    hr = np.empty((cfg.batch_size, images[0].shape[0], hp, hp))
    for b in range(cfg.batch_size):
        img = images[rng.integers(len(images))]
        y = rng.integers(img.shape[-2] - hp + 1)
        x = rng.integers(img.shape[-1] - hp + 1)
        patch = img[:, y:y + hp, x:x + hp]
        hr[b] = _augment(patch, rng) if cfg.augment else patch
    lr = bicubic_resize(hr, (cfg.patch_size, cfg.patch_size))
    return lr.astype(dtype), hr.astype(dtype)


@dataclass
class ValidationSet:
    lr: np.ndarray
    hr: np.ndarray
    scale: int

    @classmethod
    def from_images(cls, images: Sequence[np.ndarray], scale: int, patch_size: int, per_image: int = 4,
                    seed: int = 12345) -> "ValidationSet":
        """Fixed random crops from held-out images."""
        rng = make_rng(seed)
        hp = patch_size * scale
        crops = []
        for img in images:
            if img.shape[-2] < hp or img.shape[-1] < hp:
                raise ImageTooSmallError(f"validation image {img.shape} smaller than {hp}x{hp}")
            for _ in range(per_image):
                y = rng.integers(img.shape[-2] - hp + 1)
                x = rng.integers(img.shape[-1] - hp + 1)
                crops.append(img[:, y:y + hp, x:x + hp])
        hr = np.stack(crops)
        return cls(bicubic_resize(hr, (patch_size, patch_size)), hr, scale)

    def _y_psnr(self, pred: np.ndarray) -> float:
        pred = np.clip(pred, 0.0, 1.0)
        if pred.shape[1] == 3:
            a, b = rgb_to_y(pred), rgb_to_y(self.hr)
        else:
            a, b = pred * 255.0, self.hr * 255.0
        return psnr(a, b, 255.0, crop_border=self.scale)

    def evaluate(self, m: Model) -> float:
        """Y-channel PSNR of the model using population statistics."""
        out = model_forward(m, self.lr.astype(m.dtype), bn_mode=BnMode.INFERENCE)
        return self._y_psnr(out.astype(np.float64))

    def bicubic_baseline(self) -> float:
        up = bicubic_resize(self.lr, self.hr.shape[-2:])
        return self._y_psnr(up)


@dataclass
class LogRow:
    iter: int
    lr: float
    loss: float
    psnr_val: float


@dataclass
class TrainResult:
    model: Model
    rows: list[LogRow]
    freeze_iter: int
    bicubic_psnr: float | None = None


def _dump_diagnostics(path: Path, m: Model, iteration: int, lr: float, loss: float) -> None:
    stats = {name: {"max_abs": float(np.nanmax(np.abs(a))) if a.size else 0.0,
                    "finite": bool(np.all(np.isfinite(a)))}
             for name, a, _ in m.named_tensors()}
    path.write_text(json.dumps({"iteration": iteration, "lr": lr, "loss": loss, "tensors": stats}, indent=1))


def train_loop(m: Model, images: Sequence[np.ndarray], cfg: TrainConfig, val: ValidationSet | None = None,
               log_path: str | Path | None = None, header: dict | None = None,
               callback: Callable[[int, Model, float], None] | None = None) -> TrainResult:
    """Train ``m`` in place with L1 loss and Adam, freezing BN at ``cfg.freeze_iter``.

    ``log_path`` receives a CSV ``iter,lr,loss,psnr_val`` preceded by ``#``-prefixed
    lines echoing ``header`` and the effective config. ``callback(it, m, loss)`` runs
    after every optimizer step.
    """
    rng = make_rng(cfg.seed)
    params = m.trainable()
    state = AdamState()
    rows: list[LogRow] = []
    writer = None
    fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fh = open(log_path, "w", newline="")
        for key, value in {**(header or {}), **cfg.to_dict()}.items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(["iter", "lr", "loss", "psnr_val"])
    window: list[float] = []
    try:
        for it in range(cfg.total_iters):
            if it == cfg.freeze_iter:
                freeze_bn(m)
                log.info("BN statistics frozen at iteration %d", it)
            lr = lr_at(it, cfg)
            lr_batch, hr_batch = sample_patch_batch(images, cfg, m.spec.scale, rng, m.dtype)
            tape = GradTape()
            out = model_forward(m, lr_batch, tape)
            loss = l1_loss(out, hr_batch)
            if not math.isfinite(loss):
                dump = log_path.with_suffix(".diverged.json") if log_path is not None else None
                if dump is not None:
                    _dump_diagnostics(dump, m, it, lr, loss)
                raise TrainingDivergedError(it, loss, dump)
            grads = model_backward(l1_loss_backward(out, hr_batch), tape, m)
            grads.pop("input")
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            window.append(loss)
            if callback is not None:
                callback(it, m, loss)
            if it % cfg.log_interval == 0:
                row = LogRow(it, lr, float(np.mean(window)), val.evaluate(m) if val is not None else float("nan"))
                window.clear()
                rows.append(row)
                log.info("iter %d lr %.3g loss %.5f psnr %.3f", row.iter, row.lr, row.loss, row.psnr_val)
                if writer is not None:
                    writer.writerow([row.iter, f"{row.lr:.8g}", f"{row.loss:.8g}", f"{row.psnr_val:.6f}"])
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    m.provenance.update({"iters": cfg.total_iters, "freeze_iter": cfg.freeze_iter, "seed": cfg.seed})
    return TrainResult(m, rows, cfg.freeze_iter, val.bicubic_baseline() if val is not None else None)
