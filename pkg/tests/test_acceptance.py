"""Acceptance criteria, one test each.

Every test prints a ``CRITERION n ...: PASS|FAIL`` line; the lines are
repeated in the terminal summary.  The training criteria (6, 7, 8) are
marked ``slow``; deselect them with ``-m "not slow"``.  Set
``GDLNET_TREND_STEPS`` to change the training budget of criteria 7 and 8.
"""
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gdlnet import data, evaluate, gradcheck
from gdlnet.cli import main
from gdlnet.config import load_config
from gdlnet.gabor import eval_gabor, gabor_fourier
from gdlnet.net import (
    TIE_FAMILIES,
    ArchConfig,
    analysis_conv,
    count_params,
    forward,
    init_model,
    synthesis_conv,
)
from gdlnet.train import make_batch, mse_loss, train

from oracles import naive_forward

TREND_STEPS = int(os.environ.get("GDLNET_TREND_STEPS", "5000"))


def load_split(run):
    return (data.Dataset.from_manifest(run.train_manifest, "train").images(),
            data.Dataset.from_manifest(run.test_manifest, "test").images())


def test_gradient_exactness(criterion):
    arch = ArchConfig(3, 8, 2, 7, 2, adaptive=True)
    t0 = time.perf_counter()
    worst, kinks = 0.0, 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        theta = gradcheck.random_model(arch, rng)
        y, x, sigma = gradcheck.random_problem(arch, rng, 32)
        rep = gradcheck.check_gradients(theta, y, x, sigma, h=1e-6)
        worst = max(worst, rep.worst_overall())
        kinks += rep.kinks
    secs = time.perf_counter() - t0
    ok = worst <= 1e-5 and secs <= 300
    assert criterion(1, "gradient exactness", ok,
                     f"worst_rel_err={worst:.2e} kink_fallbacks={kinks} time={secs:.0f}s")


def test_fourier_identity(criterion):
    rng = np.random.default_rng(2)
    P = 21
    grid = 2 * np.pi * np.fft.fftfreq(P)
    w2, w1 = np.meshgrid(grid, grid, indexing="ij")
    omega = np.stack([w1, w2], axis=-1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        phi = np.r_[rng.uniform(0.2, 2.0), rng.uniform(0.3036, 0.6, 2),
                    rng.uniform(-0.6 * np.pi, 0.6 * np.pi, 2), rng.uniform(-np.pi, np.pi)]
        dft = np.fft.fft2(np.fft.ifftshift(eval_gabor(phi, P)))
        worst = max(worst, np.abs(dft - gabor_fourier(phi, omega, periods=2)).max())
    secs = time.perf_counter() - t0
    ok = worst <= 1e-2 and secs <= 60
    assert criterion(2, "Fourier identity", ok, f"max_abs_err={worst:.2e} time={secs:.1f}s")


def test_adjoint_exactness(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(100):
        s = 1 + i % 2
        M, P = int(rng.integers(1, 9)), int(rng.choice([1, 3, 5, 7, 11]))
        H, W = s * int(rng.integers(1, 20)), s * int(rng.integers(1, 20))
        w = rng.standard_normal((M, P, P))
        x = rng.standard_normal((H, W))
        z = rng.standard_normal((M, H // s, W // s))
        lhs = np.vdot(analysis_conv(x, w, s), z)
        rhs = np.vdot(x, synthesis_conv(z, w, s))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    assert criterion(3, "adjoint exactness", worst <= 1e-10, f"worst_rel_gap={worst:.2e}")


def test_oracle_equivalence(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(30):
        s = int(rng.choice([1, 2]))
        tie = frozenset(f for f in TIE_FAMILIES if rng.random() < 0.3)
        arch = ArchConfig(int(rng.integers(1, 5)), int(rng.integers(1, 9)), s,
                          int(rng.choice([1, 3, 5, 7])), int(rng.integers(1, 3)),
                          bool(i % 2), tie)
        theta = gradcheck.random_model(arch, rng)
        H, W = s * int(rng.integers(1, 16 // s + 1)), s * int(rng.integers(1, 16 // s + 1))
        y = rng.random((H, W))
        sigma = float(rng.uniform(0, 60))
        worst = max(worst, np.abs(forward(theta, y, sigma)[0] - naive_forward(theta, y, sigma)).max())
    assert criterion(4, "oracle equivalence", worst <= 1e-12, f"max_abs_err={worst:.2e}")


def test_parameter_counts(criterion):
    n1 = count_params(load_config("gdlnet_s_mog1").arch)
    n3 = count_params(load_config("gdlnet_s_mog3").arch)
    rel1, rel3 = abs(n1 - 66_000) / 66_000, abs(n3 - 188_000) / 188_000
    ok = n1 == 66_924 and n3 == 190_632 and rel1 <= 0.015 and rel3 <= 0.015
    assert criterion(5, "parameter counts", ok,
                     f"mog1={n1} ({rel1:+.2%} vs 66k) mog3={n3} ({rel3:+.2%} vs 188k)")


@pytest.mark.slow
def test_desk_scale_denoising(criterion):
    run = load_config("tiny")
    tr, te = load_split(run)
    t0 = time.perf_counter()
    res = train(run.arch, tr, run.training)
    secs = time.perf_counter() - t0
    rep = evaluate.sweep(res.theta, te, [25])[0]
    gain = rep.mean - rep.noisy_mean
    ok = gain >= 5 and secs <= 7200
    # regression bound on the training loss, checked on the same run: the
    # starting loss is that of the initial model on the first training batch
    theta0 = init_model(run.arch, data.stream(run.training.seed, data.STREAM_INIT))
    clean, noisy, sig = make_batch(tr, run.training, 0)
    start = mse_loss(forward(theta0, noisy, sig)[0], clean) / run.training.batch
    early = min(r["loss"] for r in res.records if "step" in r and r["step"] <= 2000)
    drop = 1 - early / start
    criterion("6a", "training loss halves within 2000 steps", drop >= 0.5,
              f"initial={start:.4g} best_window_by_2000={early:.4g} drop={drop:.1%}")
    assert criterion(6, "desk-scale denoising", ok,
                     f"psnr={rep.mean:.2f} noisy={rep.noisy_mean:.2f} gain={gain:+.2f}dB "
                     f"steps={run.training.steps} time={secs / 60:.0f}min")
    assert drop >= 0.5


@pytest.mark.slow
def test_generalization_trend(criterion):
    results = {}
    t0 = time.perf_counter()
    for name in ("tiny_adaptive", "tiny_blind"):
        run = load_config(name)
        tr, te = load_split(run)
        theta = train(run.arch, tr, replace(run.training, steps=TREND_STEPS)).theta
        results[name] = {r.sigma_test: r.mean for r in evaluate.sweep(theta, te, [30, 50])}
    secs = time.perf_counter() - t0
    ad, bl = results["tiny_adaptive"], results["tiny_blind"]
    drop = bl[30] - bl[50]
    ok = ad[50] > bl[50] and drop >= 3 and secs <= 4 * 3600
    assert criterion(7, "generalization trend", ok,
                     f"sigma50 adaptive={ad[50]:.2f} blind={bl[50]:.2f}; blind sigma30->50 "
                     f"drop={drop:.2f}dB steps={TREND_STEPS} time={secs / 60:.0f}min")


@pytest.mark.slow
def test_untying_trend(criterion):
    run = load_config("tiny")
    tr, te = load_split(run)
    full = frozenset(TIE_FAMILIES)
    psnr = {}
    for label, tie in (("tied", full), ("untied_alpha", full - {"alpha"})):
        arch = replace(run.arch, tie=tie)
        theta = train(arch, tr, replace(run.training, steps=TREND_STEPS)).theta
        psnr[label] = evaluate.sweep(theta, te, [25])[0].mean
    ok = psnr["untied_alpha"] >= psnr["tied"]
    assert criterion(8, "untying trend", ok,
                     f"tied={psnr['tied']:.2f} untied_alpha={psnr['untied_alpha']:.2f} "
                     f"steps={TREND_STEPS}")


def test_determinism(criterion, tmp_path):
    models = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", "tiny", "--out", str(out), "--seed", "7",
                     "--steps", "25", "--threads", "1", "--quiet"]) == 0
        models.append((out / "model.gdl").read_bytes())
    noisy = tmp_path / "noisy.pgm"
    x = data.load_image(Path(data.__file__).parent / "corpus" / "camera.pgm")
    data.save_image(noisy, evaluate.eval_noise(x, 25, 0))
    outs = []
    for name in ("d1.pgm", "d2.pgm"):
        assert main(["denoise", "--model", str(tmp_path / "a" / "model.gdl"), "--image",
                     str(noisy), "--out", str(tmp_path / name), "--threads", "1"]) == 0
        outs.append((tmp_path / name).read_bytes())
    ok = models[0] == models[1] and outs[0] == outs[1]
    assert criterion(9, "determinism", ok,
                     f"model_files_identical={models[0] == models[1]} "
                     f"denoised_identical={outs[0] == outs[1]}")


def test_zero_input_fixed_point(criterion):
    rng = np.random.default_rng(10)
    bad = 0
    n = 0
    for i in range(40):
        s = int(rng.choice([1, 2, 4]))
        arch = ArchConfig(int(rng.integers(1, 5)), int(rng.integers(1, 9)), s,
                          int(rng.choice([1, 3, 5, 7])), int(rng.integers(1, 4)), bool(i % 2))
        theta = (gradcheck.random_model(arch, rng) if i % 3
                 else init_model(arch, np.random.default_rng(i)))
        for shape in ((16, 16), (2, 13, 7)):
            n += 1
            xhat = forward(theta, np.zeros(shape), float(rng.uniform(0, 80)))[0]
            bad += xhat.shape != shape or bool(np.any(xhat != 0))
    assert criterion(10, "zero-input fixed point", bad == 0, f"models={n} nonzero_outputs={bad}")
