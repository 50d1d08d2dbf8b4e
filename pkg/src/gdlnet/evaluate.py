"""PSNR evaluation, noise-level sweeps, dictionary usage and montages."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data
from .net import ModelParams, forward

# fixed noise seed for evaluation, distinct from any training stream
EVAL_SEED = 20220915

CSV_HEADER = ["model_id", "sigma_train_lo", "sigma_train_hi", "sigma_test", "image", "psnr_db"]


def psnr(x, xhat, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf when the images are identical."""
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    d = x - xhat
    mse = float(np.vdot(d, d)) / d.size
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def eval_noise(x, sigma: float, index: int, seed: int = EVAL_SEED) -> np.ndarray:
    """Noisy copy of test image ``index``; the same Gaussian field is reused for every sigma."""
    return data.add_awgn(x, sigma, data.stream(seed, data.STREAM_EVAL, index))


@dataclass
class EvalReport:
    model_id: str
    sigma_train: tuple
    sigma_test: float
    images: list
    psnrs: list
    noisy_psnrs: list = field(default_factory=list)
    wall_ms: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.psnrs))

    @property
    def noisy_mean(self) -> float:
        return float(np.mean(self.noisy_psnrs))

    def rows(self):
        lo, hi = self.sigma_train
        for name, p in zip(self.images, self.psnrs):
            yield [self.model_id, f"{lo:g}", f"{hi:g}", f"{self.sigma_test:g}", name, f"{p:.6f}"]

    def baseline_rows(self):
        lo, hi = self.sigma_train
        for name, p in zip(self.images, self.noisy_psnrs):
            yield ["noisy-input", f"{lo:g}", f"{hi:g}", f"{self.sigma_test:g}", name, f"{p:.6f}"]


def sweep(model: ModelParams, images, sigma_list, names=None, model_id: str = "model",
          sigma_train=(float("nan"), float("nan")), seed: int = EVAL_SEED) -> list[EvalReport]:
    """Denoise every image at every test noise level with fixed noise realizations.

    The true noise level is passed to the model, which only matters for
    adaptive thresholds.
    """
    names = names or [f"img{i:03d}" for i in range(len(images))]
    reports = []
    for sigma in sigma_list:
        t0 = time.perf_counter()
        ps, base = [], []
        for i, x in enumerate(images):
            y = eval_noise(x, sigma, i, seed)
            base.append(psnr(x, y))
            ps.append(psnr(x, forward(model, y, sigma)[0]))
        reports.append(EvalReport(model_id, tuple(sigma_train), float(sigma), list(names), ps,
                                  base, (time.perf_counter() - t0) * 1000))
    return reports


def write_reports(path, reports, baseline: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for rep in reports:
            w.writerows(rep.rows())
            if baseline:
                w.writerows(rep.baseline_rows())


@dataclass
class UsageProfile:
    usage: np.ndarray   # (M,)
    order: np.ndarray   # permutation, most used first


def usage_order(usage) -> np.ndarray:
    """Indices sorting ``usage`` non-increasingly, ties by subband index."""
    return np.argsort(-np.asarray(usage), kind="stable")


def usage_profile(model: ModelParams, images, sigma: float = 0.0,
                  seed: int = EVAL_SEED) -> UsageProfile:
    """Mean absolute final-layer code magnitude of each subband over a dataset.

    With ``sigma > 0`` every image is first noised with the evaluation noise.
    """
    if len(images) == 0:
        raise ValueError("usage profile needs at least one image")
    M = model.config.M
    sums = [[] for _ in range(M)]
    count = 0
    for i, x in enumerate(images):
        y = eval_noise(x, sigma, i, seed) if sigma > 0 else np.asarray(x, dtype=np.float64)
        _, cache = forward(model, y, sigma, keep_cache=True)
        zk = np.abs(cache.z[-1][0])  # (h*w, M)
        count += zk.shape[0]
        for m, v in enumerate(zk.sum(axis=0)):
            sums[m].append(float(v))
    # fsum is exactly rounded, so the result does not depend on image order
    usage = np.array([math.fsum(s) for s in sums]) / count
    return UsageProfile(usage, usage_order(usage))


def montage(weights, order=None, gap: int = 1) -> np.ndarray:
    """Grid of ceil(sqrt(M))^2 cells, each filter mapped independently to [0, 255]."""
    W = np.asarray(weights, dtype=np.float64)
    M, P, _ = W.shape
    order = np.arange(M) if order is None else np.asarray(order)
    if sorted(order.tolist()) != list(range(M)):
        raise ValueError("order must be a permutation of the subbands")
    n = math.ceil(math.sqrt(M))
    side = n * P + (n - 1) * gap
    out = np.zeros((side, side), dtype=np.uint8)
    for cell, m in enumerate(order):
        f = W[m]
        lo, hi = f.min(), f.max()
        if hi > lo:
            pix = np.round((f - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            pix = np.full((P, P), 128, dtype=np.uint8)
        i, j = divmod(cell, n)
        out[i * (P + gap):i * (P + gap) + P, j * (P + gap):j * (P + gap) + P] = pix
    return out


def export_montage(weights, order, path, gap: int = 1) -> None:
    data.write_pgm(path, montage(weights, order, gap))
