"""``repsr`` command line: train, merge, verify, infer, count, diagnose."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .diagnostics import bn_stats_trace, paste_experiment, write_heatmap_png, write_trace_csv
from .imaging import bicubic_resize, read_png, rgb_to_ycbcr, write_png, ycbcr_to_rgb
from .model import REFERENCE_ROWS, Form, ModelSpec, build_model, count_params_flops, model_forward
from .nn import BnMode
from .reparam import BnModeError, collapse_model, verify_equivalence
from .tensor import make_rng
from .train import TrainConfig, ValidationSet, load_images, train_loop
from .weights import WeightFileError, load_model, save_model

log = logging.getLogger("repsr")


class UsageError(Exception):
    pass


# key -> (type, default); every key may appear in the config file or as --key on the command line
TRAIN_KEYS: dict[str, tuple[type, object]] = {
    "spec": (str, "M4C8x2"),
    "colors": (int, 1),
    "width_multiplier": (int, 2),
    "num_branches": (int, 2),
    "residual": (str, "clean"),
    "bn_placement": (str, "mid_only"),
    "precision": (str, "f32"),
    "data": (str, "smoke"),
    "val_holdout": (int, 2),
    "val_patches": (int, 4),
    "iters": (int, 1000),
    "batch_size": (int, 32),
    "patch_size": (int, 64),
    "lr": (float, 4e-4),
    "schedule": (str, "multistep"),
    "milestones": (str, ""),
    "gamma": (float, 0.5),
    "cycles": (int, 4),
    "lr_min": (float, 1e-7),
    "freeze_fraction": (float, 0.1),
    "tail_init_scale": (float, 0.0),
    "seed": (int, 0),
    "log_interval": (int, 100),
    "augment": (str, "false"),
    "out": (str, "model.rpsr"),
    "log": (str, "train_log.csv"),
}


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in TRAIN_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def effective_train_config(args: argparse.Namespace) -> dict:
    raw = {k: str(default) for k, (_, default) in TRAIN_KEYS.items()}
    if args.config:
        raw.update(read_config_file(args.config))
    for key in TRAIN_KEYS:
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    out = {}
    for key, (typ, _) in TRAIN_KEYS.items():
        try:
            out[key] = typ(raw[key])
        except ValueError:
            raise UsageError(f"bad value for {key}: {raw[key]!r}") from None
    out["augment"] = out["augment"].lower() in ("1", "true", "yes", "on")
    return out


def _parse_pair(text: str, sep: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.lower().split(sep))
    except ValueError:
        raise UsageError(f"expected two integers separated by {sep!r}, got {text!r}") from None
    return a, b


def cmd_train(args) -> int:
    c = effective_train_config(args)
    spec = ModelSpec.parse(c["spec"], colors=c["colors"], width_multiplier=c["width_multiplier"],
                           num_branches=c["num_branches"], residual=c["residual"],
                           bn_placement=c["bn_placement"], precision=c["precision"])
    milestones = tuple(int(v) for v in c["milestones"].split(",") if v.strip()) or None
    cfg = TrainConfig(total_iters=c["iters"], batch_size=c["batch_size"], patch_size=c["patch_size"],
                      lr0=c["lr"], schedule=c["schedule"], milestones=milestones, gamma=c["gamma"],
                      cycles=c["cycles"], lr_min=c["lr_min"], freeze_fraction=c["freeze_fraction"],
                      seed=c["seed"], log_interval=c["log_interval"], augment=c["augment"])
    images = load_images(c["data"], spec.colors)
    val = None
    if c["val_holdout"] > 0:
        if c["val_holdout"] >= len(images):
            raise UsageError("val_holdout must leave at least one training image")
        images, held = images[:-c["val_holdout"]], images[-c["val_holdout"]:]
        val = ValidationSet.from_images(held, spec.scale, min(cfg.patch_size, 48), c["val_patches"])
    model = build_model(spec, make_rng(cfg.seed), c["tail_init_scale"])
    result = train_loop(model, images, cfg, val, c["log"], header={"spec": spec.name, **c})
    save_model(result.model, c["out"])
    last = result.rows[-1]
    print(f"trained {spec.name} for {cfg.total_iters} iters (BN frozen at {result.freeze_iter}); "
          f"last loss {last.loss:.5f}; val psnr {last.psnr_val:.3f} dB"
          + (f" (bicubic {result.bicubic_psnr:.3f} dB)" if result.bicubic_psnr is not None else ""))
    print(f"weights -> {c['out']}; log -> {c['log']}")
    return 0


def cmd_merge(args) -> int:
    m = load_model(args.model)
    plain = collapse_model(m)
    save_model(plain, args.out)
    print(f"merged {m.spec.name}: {m.num_trainable()} -> {plain.num_trainable()} parameters -> {args.out}")
    return 0


def cmd_verify(args) -> int:
    train_form = load_model(args.model)
    if train_form.form is not Form.TRAINING:
        raise UsageError("--model must be a training-form weight file")
    plain = load_model(args.plain) if args.plain else collapse_model(train_form)
    h, w = _parse_pair(args.size, "x")
    report = verify_equivalence(train_form, plain, args.trials, make_rng(args.seed), args.tolerance, (h, w))
    status = "PASS" if report.passed else "FAIL"
    suffix = " (vacuous: no trials)" if report.vacuous else ""
    print(f"{status} max_abs_diff={report.max_abs_diff:.3e} tolerance={report.tolerance:g} "
          f"trials={report.trials}{suffix}")
    return 0 if report.passed else 1


def _upscale(m, img: np.ndarray) -> np.ndarray:
    """Super-resolve a (1, c, h, w) image in [0, 1] with either model form."""
    mode = BnMode.INFERENCE if m.form is Form.TRAINING else None
    if m.spec.colors == 1 and img.shape[1] == 3:
        ycc = rgb_to_ycbcr(img[0]) / 255.0
        y = model_forward(m, ycc[None, :1].astype(m.dtype), bn_mode=mode)[0].astype(np.float64)
        cbcr = bicubic_resize(ycc[1:], y.shape[-2:])
        return ycbcr_to_rgb(np.concatenate([y, cbcr]) * 255.0)[None]
    if m.spec.colors == 3 and img.shape[1] == 1:
        img = np.repeat(img, 3, axis=1)
    return model_forward(m, img.astype(m.dtype), bn_mode=mode).astype(np.float64)


def cmd_infer(args) -> int:
    m = load_model(args.model)
    if args.scale is not None and args.scale != m.spec.scale:
        raise UsageError(f"model upscales x{m.spec.scale}, --scale {args.scale} requested")
    img = read_png(args.input)
    write_png(args.output, _upscale(m, img))
    print(f"{args.input} {img.shape[3]}x{img.shape[2]} -> {args.output} "
          f"{img.shape[3] * m.spec.scale}x{img.shape[2] * m.spec.scale}")
    return 0


def cmd_count(args) -> int:
    h, w = _parse_pair(args.lr_size, "x")[::-1]
    if args.table:
        print(f"{'row':<4} {'spec':<8} {'params':>9} {'ref K':>8} {'err%':>6} {'GMACs':>8} {'ref G':>8} {'err%':>6}")
        for row, (name, pk, pg) in REFERENCE_ROWS.items():
            cost = count_params_flops(ModelSpec.parse(name, scale=4, colors=1), Form.PLAIN, (h, w))
            print(f"{row:<4} {name:<8} {cost.params:>9} {pk:>8.2f} {100 * (cost.params_k / pk - 1):>6.2f} "
                  f"{cost.macs_g:>8.3f} {pg:>8.2f} {100 * (cost.macs_g / pg - 1):>6.2f}")
        return 0
    spec = ModelSpec.parse(args.spec, colors=args.colors, width_multiplier=args.width_multiplier,
                           num_branches=args.num_branches)
    cost = count_params_flops(spec, args.form, (h, w))
    print(f"spec {spec.name} colors {spec.colors} form {args.form}")
    print(f"params {cost.params}")
    print(f"macs {cost.macs} ({cost.macs_g:.3f}G at {w}x{h} LR)")
    return 0


def cmd_diagnose(args) -> int:
    m = load_model(args.model)
    if args.what == "stats":
        img = read_png(args.input, m.spec.colors)
        trace = bn_stats_trace(m, img)
        write_trace_csv(args.out, trace)
        print(f"{len(trace)} BN layers traced -> {args.out}")
        return 0
    base = read_png(args.base, m.spec.colors)
    patch = read_png(args.patch, m.spec.colors)
    result = paste_experiment(m, base, patch, _parse_pair(args.at, ","))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "sr_base.png", np.clip(result.output_base, 0, 1))
    write_png(out / "sr_pasted.png", np.clip(result.output_pasted, 0, 1))
    write_heatmap_png(out / "diff_heatmap.png", result.heatmap)
    with open(out / "diff_stats.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        stats = result.stats()
        wr.writerow(stats.keys())
        wr.writerow(f"{v:.9g}" for v in stats.values())
    print(f"paste experiment -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repsr", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = bit-deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a training-form model")
    t.add_argument("--config", help="flat key=value config file")
    for key, (typ, default) in TRAIN_KEYS.items():
        t.add_argument(f"--{key}", dest=key, default=None, help=f"(default {default})")
    t.set_defaults(func=cmd_train)

    mg = sub.add_parser("merge", help="collapse a frozen training-form model into plain form")
    mg.add_argument("--model", required=True)
    mg.add_argument("--out", required=True)
    mg.set_defaults(func=cmd_merge)

    v = sub.add_parser("verify", help="check training-form vs plain-form equivalence")
    v.add_argument("--model", required=True, help="training-form weights")
    v.add_argument("--plain", help="plain-form weights (default: collapse --model)")
    v.add_argument("--trials", type=int, default=50)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tolerance", type=float)
    v.add_argument("--size", default="16x16", help="LR probe size HxW")
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("infer", help="super-resolve a PNG")
    i.add_argument("--model", required=True)
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", dest="output", required=True)
    i.add_argument("--scale", type=int)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("count", help="parameter and MAC counts")
    c.add_argument("--spec", default="M4C16x4")
    c.add_argument("--colors", type=int, default=1)
    c.add_argument("--form", choices=[f.value for f in Form], default="plain")
    c.add_argument("--width-multiplier", type=int, default=2)
    c.add_argument("--num-branches", type=int, default=2)
    c.add_argument("--lr-size", default="320x180", help="LR size WxH")
    c.add_argument("--table", action="store_true", help="compare with the published reference rows")
    c.set_defaults(func=cmd_count)

    d = sub.add_parser("diagnose", help="BN statistics trace or patch-paste experiment")
    dsub = d.add_subparsers(dest="what", required=True)
    ds = dsub.add_parser("stats")
    ds.add_argument("--model", required=True)
    ds.add_argument("--in", dest="input", required=True)
    ds.add_argument("--out", required=True)
    dp = dsub.add_parser("paste")
    dp.add_argument("--model", required=True)
    dp.add_argument("--base", required=True)
    dp.add_argument("--patch", required=True)
    dp.add_argument("--at", required=True, help="top-left corner as Y,X in LR pixels")
    dp.add_argument("--out-dir", required=True)
    for sp in (ds, dp):
        sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"repsr: usage error: {exc}", file=sys.stderr)
        return 2
    except WeightFileError as exc:
        print(f"repsr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except BnModeError as exc:
        print(f"repsr: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"repsr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
