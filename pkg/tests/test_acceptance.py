"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the
"acceptance criteria" section of the pytest terminal summary.
"""
import itertools
import re
import struct
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from helpers import randomize_biases
from oracles import numeric_grad, psnr_loops, rel_error
from repsr.block import BlockSpec, BnPlacement, Residual, block_backward, block_forward, build_block
from repsr.cli import main
from repsr.diagnostics import bn_stats_trace, paste_experiment, psnr, receptive_radius
from repsr.model import REFERENCE_ROWS, ModelSpec, build_model, calibrate_bn_stats, model_backward, model_forward
from repsr.nn import (BnMode, BnParams, ConvParams, GradTape, batchnorm_backward, batchnorm_forward, conv2d_backward,
                      conv2d_forward, l1_loss, l1_loss_backward, nearest_upsample, nearest_upsample_backward,
                      pixel_shuffle, pixel_shuffle_backward, prelu_backward, prelu_forward)
from repsr.reparam import (collapse_model, demonstrate_padding_failure, fuse_conv3x3_conv1x1, verify_equivalence)
from repsr.tensor import make_rng
from repsr.train import TrainConfig, ValidationSet, freeze_bn, load_images, train_loop
from repsr.weights import load_model, save_model


# ---------------------------------------------------------------------------
# 1. fusion equivalence

def _random_trained_like(spec: ModelSpec, rng):
    """Random model with non-trivial biases, BN affine terms and population statistics."""
    m = build_model(spec, rng)
    randomize_biases(m, rng)
    for _, bn in m.bn_layers():
        bn.gamma[:] = rng.uniform(0.5, 1.5, bn.channels)
        bn.beta[:] = rng.normal(0, 0.2, bn.channels)
    calibrate_bn_stats(m, rng.uniform(-1, 1, (4, spec.colors, 12, 12)).astype(m.dtype), BnMode.FROZEN)
    return m


@pytest.mark.slow
def test_criterion_1_fusion_equivalence(record_criterion):
    rng = make_rng(2024)
    specs = ["M4C8", "M4C16", "M10C16", "M10C32", "M16C64"]
    cases = []
    for k, (text, scale, residual) in enumerate(itertools.product(specs, (2, 4), list(Residual))):
        for j in range(4):
            cases.append((text, scale, residual, 1 + j, 1 + (j + k) % 4))
    assert len(cases) >= 100
    start = time.perf_counter()
    worst = {"f32": (0.0, None), "f64": (0.0, None)}
    failures = {"f32": 0, "f64": 0}
    for text, scale, residual, wm, branches in cases:
        spec = ModelSpec.parse(text, scale=scale, width_multiplier=wm, num_branches=branches, residual=residual,
                               precision="f64")
        m64 = _random_trained_like(spec, rng)
        for name, m in (("f64", m64), ("f32", m64.astype(np.float32))):
            report = verify_equivalence(m, collapse_model(m), trials=2, rng=rng, lr_size=(12, 12))
            failures[name] += not report.passed
            if report.max_abs_diff >= worst[name][0]:
                worst[name] = (report.max_abs_diff, f"{text}x{scale} wm{wm} b{branches} {residual.value}")
    elapsed = time.perf_counter() - start
    passed = failures["f32"] == 0 and failures["f64"] == 0 and elapsed < 300
    record_criterion(1, passed, f"{len(cases)} models; f32 worst {worst['f32'][0]:.2e} ({worst['f32'][1]}), "
                                f"{failures['f32']} over 1e-5; f64 worst {worst['f64'][0]:.2e}, "
                                f"{failures['f64']} over 1e-10; {elapsed:.0f}s")
    assert failures["f64"] == 0
    assert failures["f32"] == 0, f"{failures['f32']} f32 models exceed 1e-5 (worst {worst['f32']})"
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 2. Reference model accounting

def test_criterion_2_reference_accounting(record_criterion, capsys):
    errs = []
    for row, (text, params_k, flops_g) in REFERENCE_ROWS.items():
        capsys.readouterr()
        assert main(["count", "--spec", f"{text}x4", "--colors", "1", "--lr-size", "320x180"]) == 0
        out = capsys.readouterr().out
        params = int(re.search(r"^params (\d+)$", out, re.M).group(1))
        macs = int(re.search(r"^macs (\d+)", out, re.M).group(1))
        errs.append((row, params / 1e3 / params_k - 1, macs / 1e9 / flops_g - 1))
    worst = max(max(abs(p), abs(f)) for _, p, f in errs)
    detail = ", ".join(f"{r} {100 * p:+.1f}%/{100 * f:+.1f}%" for r, p, f in errs)
    record_criterion(2, worst <= 0.03, f"params/FLOPs error {detail}")
    assert worst <= 0.03


# ---------------------------------------------------------------------------
# 3. gradient correctness

def _fd_conv(g, k):
    x = g.normal(size=(1, 2, 4, 4))
    p = ConvParams(g.normal(size=(3, 2, k, k)), g.normal(size=3))
    w = g.normal(size=(1, 3, 4, 4))
    tape = GradTape()
    conv2d_forward(x, p, tape)
    gin, gw, gb = conv2d_backward(w, tape, p)
    f = lambda: float((conv2d_forward(x, p) * w).sum())
    return max(rel_error(gin, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, p.weight)),
               rel_error(gb, numeric_grad(f, p.bias)))


def _fd_bn(g, mode):
    x = g.normal(size=(2, 2, 3, 3))
    p = BnParams.fresh(2, np.float64, mode=mode)
    p.gamma[:] = g.uniform(0.5, 1.5, 2)
    p.beta[:] = g.normal(size=2)
    p.running_mean[:] = g.normal(size=2)
    p.running_var[:] = g.uniform(0.5, 2, 2)
    w = g.normal(size=x.shape)
    tape = GradTape()
    batchnorm_forward(x, p.copy(), tape)

    def f():
        return float((batchnorm_forward(x, p.copy()) * w).sum())  # copy: Batch mode must not drift stats

    gin, gg, gbeta = batchnorm_backward(w, tape, p)
    errs = [rel_error(gin, numeric_grad(f, x))]
    if mode is not BnMode.INFERENCE:
        errs += [rel_error(gg, numeric_grad(f, p.gamma)), rel_error(gbeta, numeric_grad(f, p.beta))]
    return max(errs)


def _fd_prelu(g):
    x = g.normal(size=(2, 3, 3, 3))
    slope = g.uniform(0.05, 0.5, 3)
    w = g.normal(size=x.shape)
    tape = GradTape()
    prelu_forward(x, slope, tape)
    gin, gs = prelu_backward(w, tape, slope)
    f = lambda: float((prelu_forward(x, slope) * w).sum())
    return max(rel_error(gin, numeric_grad(f, x)), rel_error(gs, numeric_grad(f, slope)))


def _fd_shuffle(g):
    r = int(g.integers(2, 4))
    x = g.normal(size=(1, 2 * r * r, 2, 3))
    w = g.normal(size=(1, 2, 2 * r, 3 * r))
    f = lambda: float((pixel_shuffle(x, r) * w).sum())
    return rel_error(pixel_shuffle_backward(w, r), numeric_grad(f, x))


def _fd_upsample(g):
    r = int(g.integers(2, 5))
    x = g.normal(size=(1, 2, 3, 2))
    w = g.normal(size=(1, 2, 3 * r, 2 * r))
    f = lambda: float((nearest_upsample(x, r) * w).sum())
    return rel_error(nearest_upsample_backward(w, r), numeric_grad(f, x))


def _fd_l1(g):
    pred, target = g.normal(size=(2, 1, 3, 3)), g.normal(size=(2, 1, 3, 3))
    return rel_error(l1_loss_backward(pred, target), numeric_grad(lambda: l1_loss(pred, target), pred))


def _fd_block(g, residual, placement, mode):
    spec = BlockSpec(2, int(g.integers(1, 3)), int(g.integers(1, 3)), residual, placement)
    p = build_block(spec, g, np.float64)
    for _, bn in p.bn_layers():
        bn.gamma[:] = g.uniform(0.5, 1.5, bn.channels)
        bn.beta[:] = g.normal(size=bn.channels)
        bn.running_var[:] = g.uniform(0.5, 2, bn.channels)
        bn.mode = mode
    randomize_biases(p, g)
    x = g.normal(size=(2, 2, 3, 3))
    w = g.normal(size=x.shape)
    tape = GradTape()
    block_forward(x, p.copy(), spec, tape)
    gin, grads = block_backward(w, tape, p, spec)
    assert set(grads) == {n for n, _, trainable in p.named_tensors() if trainable}
    probe = p.copy()
    f = lambda: float((block_forward(x, probe.copy(), spec) * w).sum())
    tensors = dict((n, a) for n, a, _ in probe.named_tensors())
    # the block gradient is one vector over the input and every trainable tensor
    analytic = np.concatenate([gin.ravel()] + [grads[n].ravel() for n in sorted(grads)])
    numeric = np.concatenate([numeric_grad(f, x).ravel()] + [numeric_grad(f, tensors[n]).ravel() for n in sorted(grads)])
    return rel_error(analytic, numeric)


def test_criterion_3_gradients(record_criterion):
    g = make_rng(77)
    start = time.perf_counter()
    checks = {
        "conv3x3": lambda: _fd_conv(g, 3),
        "conv1x1": lambda: _fd_conv(g, 1),
        "bn_batch": lambda: _fd_bn(g, BnMode.BATCH),
        "bn_frozen": lambda: _fd_bn(g, BnMode.FROZEN),
        "bn_inference": lambda: _fd_bn(g, BnMode.INFERENCE),
        "prelu": lambda: _fd_prelu(g),
        "pixel_shuffle": lambda: _fd_shuffle(g),
        "nearest_upsample": lambda: _fd_upsample(g),
        "l1_loss": lambda: _fd_l1(g),
    }
    worst = {name: max(fn() for _ in range(20)) for name, fn in checks.items()}
    configs = list(itertools.product(list(Residual), list(BnPlacement), [BnMode.BATCH, BnMode.FROZEN]))
    worst["repsr_block"] = max(_fd_block(g, *configs[i % len(configs)]) for i in range(24))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    passed = all(v <= 1e-4 for v in worst.values()) and elapsed < 120
    record_criterion(3, passed, f"{len(worst)} layer kinds x >=20 instances, worst rel err {worst[top]:.1e} "
                                f"({top}); {elapsed:.0f}s")
    assert all(v <= 1e-4 for v in worst.values()), worst
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 4. padding-order dichotomy

def test_criterion_4_padding_order(record_criterion):
    g = make_rng(404)
    interior, border_min, fused_border = 0.0, np.inf, 0.0
    trials = 60
    for _ in range(trials):
        cin, cmid, cout = (int(v) for v in g.integers(1, 6, 3))
        c1 = ConvParams(g.normal(0, 0.5, (cmid, cin, 1, 1)).astype(np.float32),
                        g.normal(0, 0.5, cmid).astype(np.float32))
        c1.bias[c1.bias == 0] = 0.1
        c3 = ConvParams(g.normal(0, 0.5, (cout, cmid, 3, 3)).astype(np.float32),
                        g.normal(0, 0.5, cout).astype(np.float32))
        x = g.uniform(-1, 1, (1, cin, 7, 8)).astype(np.float32)
        r = demonstrate_padding_failure(c1, c3, x=x)
        interior = max(interior, r.interior_diff)
        border_min = min(border_min, r.border_diff)
        # the supported order: 3x3 first, 1x1 second
        c3b = ConvParams(g.normal(0, 0.5, (cmid, cin, 3, 3)).astype(np.float32),
                         g.normal(0, 0.5, cmid).astype(np.float32))
        c1b = ConvParams(g.normal(0, 0.5, (cout, cmid, 1, 1)).astype(np.float32),
                         g.normal(0, 0.5, cout).astype(np.float32))
        diff = np.abs(conv2d_forward(x, fuse_conv3x3_conv1x1(c3b, c1b)).astype(np.float64)
                      - conv2d_forward(conv2d_forward(x, c3b), c1b))
        fused_border = max(fused_border, float(diff.max()))
    passed = interior <= 1e-5 and border_min > 1e-3 and fused_border <= 1e-5
    record_criterion(4, passed, f"{trials} trials: naive 1x1->3x3 interior {interior:.1e}, min border "
                                f"{border_min:.2e}; 3x3->1x1 fusion max diff {fused_border:.1e}")
    assert interior <= 1e-5 and border_min > 1e-3 and fused_border <= 1e-5


# ---------------------------------------------------------------------------
# 5. Frozen-BN semantics

def test_criterion_5_frozen_bn(record_criterion):
    g = make_rng(5)
    images = [g.uniform(size=(1, 48, 48)) for _ in range(3)]
    m = build_model(ModelSpec.parse("M2C4x2"), make_rng(0))
    cfg = TrainConfig(total_iters=40, batch_size=4, patch_size=8, freeze_fraction=0.25, log_interval=40)
    snaps = []
    train_loop(m, images, cfg, callback=lambda it, mm, _l: snaps.append(
        (it, np.concatenate([np.concatenate([bn.running_mean, bn.running_var, bn.gamma]) for _, bn in mm.bn_layers()]))))
    fi = cfg.freeze_iter
    nstats = sum(2 * bn.channels for _, bn in m.bn_layers())
    stats = lambda v: np.concatenate([v[k * 3 * c:k * 3 * c + 2 * c]
                                      for k, c in enumerate(bn.channels for _, bn in m.bn_layers())])
    post = [stats(v) for it, v in snaps if it >= fi]
    latched = all(np.array_equal(post[0], s) for s in post) and len(post) == cfg.total_iters - fi
    moved_before = not np.array_equal(stats(snaps[0][1]), stats(snaps[fi - 1][1]))
    assert post[0].size == nstats

    # affine terms keep learning after the freeze
    x = g.uniform(size=(2, 1, 8, 8)).astype(np.float32)
    tape = GradTape()
    out = model_forward(m, x, tape)
    grads = model_backward(g.normal(size=out.shape).astype(np.float32), tape, m)
    gamma_grads = [v for k, v in grads.items() if k.endswith(".gamma")]
    affine_trainable = (len(gamma_grads) == len(list(m.bn_layers()))
                        and all(np.any(v != 0) for v in gamma_grads)
                        and not np.array_equal(snaps[fi][1], snaps[-1][1]))

    # train-test consistency: Frozen forward equals Inference forward bit for bit
    consistent = np.array_equal(model_forward(m, x, bn_mode=BnMode.FROZEN),
                                model_forward(m, x, bn_mode=BnMode.INFERENCE))
    passed = latched and moved_before and affine_trainable and consistent
    record_criterion(5, passed, f"latch={latched} (freeze at {fi}, stats moved before={moved_before}), "
                                f"gamma trainable={affine_trainable}, frozen==inference bit-exact={consistent}")
    assert latched and moved_before and affine_trainable and consistent


# ---------------------------------------------------------------------------
# 6. desk-scale training

@pytest.mark.slow
def test_criterion_6_desk_training(record_criterion):
    images = load_images("smoke", 1)
    assert len(images) <= 10
    train_imgs, held = images[:-2], images[-2:]
    val = ValidationSet.from_images(held, 2, 48, per_image=4)
    # zero tail: training starts from the nearest-upsampling skip
    m = build_model(ModelSpec.parse("M4C8x2"), make_rng(0), tail_scale=0.0)
    cfg = TrainConfig(total_iters=2000, batch_size=16, patch_size=32, lr0=4e-4, log_interval=250, seed=0)
    losses, modes = [], {}
    start = time.perf_counter()
    with threadpool_limits(1):
        res = train_loop(m, train_imgs, cfg, val, callback=lambda it, mm, loss: (
            losses.append(loss), modes.setdefault(next(iter(mm.bn_layers()))[1].mode, it)))
    elapsed = time.perf_counter() - start
    final, bicubic = val.evaluate(m), res.bicubic_psnr
    finite = len(losses) == 2000 and bool(np.all(np.isfinite(losses)))
    freeze_ok = res.freeze_iter == 1800 and modes.get(BnMode.FROZEN) == 1800
    passed = final >= bicubic + 0.2 and finite and freeze_ok and elapsed <= 900
    record_criterion(6, passed, f"val Y-PSNR {final:.3f} dB vs bicubic {bicubic:.3f} dB ({final - bicubic:+.3f}); "
                                f"losses finite={finite}; freeze at {modes.get(BnMode.FROZEN)}; {elapsed:.0f}s")
    assert finite and freeze_ok
    assert final >= bicubic + 0.2
    assert elapsed <= 900


# ---------------------------------------------------------------------------
# 7. inference efficiency

@pytest.mark.slow
def test_criterion_7_plain_form_speed(record_criterion):
    g = make_rng(7)
    m = _random_trained_like(ModelSpec.parse("M10C32x4"), g)
    plain = collapse_model(m)
    x = g.uniform(size=(1, 1, 180, 320)).astype(np.float32)
    times = {}
    with threadpool_limits(1):
        for name, model in (("training", m), ("plain", plain)):
            model_forward(model, x)  # warm-up
            runs = []
            for _ in range(20):
                t = time.perf_counter()
                model_forward(model, x)
                runs.append(time.perf_counter() - t)
            times[name] = float(np.mean(runs))
    speedup = times["training"] / times["plain"]
    record_criterion(7, speedup >= 1.3, f"M10C32 at 320x180, 20 runs, 1 thread: training {times['training']:.3f}s, "
                                        f"plain {times['plain']:.3f}s, speedup {speedup:.2f}x")
    assert speedup >= 1.3


# ---------------------------------------------------------------------------
# 8. diagnostics instruments

def test_criterion_8_diagnostics(record_criterion):
    g = make_rng(8)
    m = build_model(ModelSpec.parse("M4C16x4"), g)
    probe = g.uniform(size=(1, 1, 24, 24)).astype(np.float32)
    calibrate_bn_stats(m, probe)
    gap = max(max(abs(r.mean_l1_inst - r.mean_l1_pop), abs(r.var_l1_inst - r.var_l1_pop))
              for r in bn_stats_trace(m, probe))

    ident = build_model(ModelSpec.parse("M3C8x2", precision="f64", residual=Residual.WITH_BN), g)
    for _, bn in ident.bn_layers():
        bn.running_mean[:] = g.normal(size=bn.channels)
        bn.running_var[:] = g.uniform(0.5, 2, bn.channels)
        bn.gamma[:] = np.sqrt(bn.running_var + bn.eps)
        bn.beta[:] = bn.running_mean
    freeze_bn(ident)
    r, s = receptive_radius(ident), ident.spec.scale
    locality = True
    for _ in range(10):
        y, x0 = (int(v) for v in g.integers(0, 20, 2))
        ph, pw = (int(v) for v in g.integers(1, 5, 2))
        res = paste_experiment(ident, g.uniform(size=(1, 1, 24, 24)), g.uniform(size=(1, 1, ph, pw)), (y, x0))
        allowed = np.zeros(res.heatmap.shape, bool)
        allowed[max(0, (y - r) * s):(y + ph + r) * s, max(0, (x0 - r) * s):(x0 + pw + r) * s] = True
        locality &= bool(res.heatmap[~allowed].max(initial=0.0) == 0.0) and res.diff.shape == res.output_base.shape

    psnr_err = 0.0
    for _ in range(20):
        a, b = g.uniform(0, 255, (1, 1, 16, 16)), g.uniform(0, 255, (1, 1, 16, 16))
        psnr_err = max(psnr_err, abs(psnr(a, b) - psnr_loops(a, b, 255.0)))
    passed = gap < 1e-4 and locality and psnr_err <= 1e-9
    record_criterion(8, passed, f"self-calibration gap {gap:.1e}; paste locality holds={locality}; "
                                f"PSNR vs loop oracle {psnr_err:.1e} dB")
    assert gap < 1e-4 and locality and psnr_err <= 1e-9


# ---------------------------------------------------------------------------
# 9. persistence

def test_criterion_9_persistence(record_criterion, tmp_path):
    g = make_rng(9)
    m = _random_trained_like(ModelSpec.parse("M2C8x2"), g)
    exact = True
    for name, model in (("train", m), ("plain", collapse_model(m)), ("f64", m.astype(np.float64))):
        path = tmp_path / f"{name}.rpsr"
        save_model(model, path)
        back = load_model(path)
        exact &= all(a.dtype == b.dtype and a.tobytes() == b.tobytes()
                     for (_, a, _), (_, b, _) in zip(model.named_tensors(), back.named_tensors()))
        save_model(back, tmp_path / "again.rpsr")
        exact &= (tmp_path / "again.rpsr").read_bytes() == path.read_bytes()

    data = (tmp_path / "train.rpsr").read_bytes()
    dims_at = data.index(b"head.weight") + len(b"head.weight")
    faults = {
        "bad magic": (b"RPSX" + data[4:], 3),
        "version": (data[:4] + struct.pack("<I", 9) + data[8:], 4),
        "truncated": (data[:-1], 5),
        "dims": (data[:dims_at] + struct.pack("<I", 7) + data[dims_at + 4:], 6),
    }
    codes = {}
    for label, (blob, _) in faults.items():
        (tmp_path / "fault.rpsr").write_bytes(blob)
        codes[label] = main(["verify", "--model", str(tmp_path / "fault.rpsr"), "--trials", "1"])
    faults_ok = all(codes[k] == want for k, (_, want) in faults.items())
    passed = exact and faults_ok
    record_criterion(9, passed, f"round-trip bit-exact={exact}; fault exit codes {codes}")
    assert exact and faults_ok
