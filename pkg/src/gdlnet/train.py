"""Reverse-mode gradients, Adam with threshold projection, and the training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data
from .gabor import FAMILIES, filter_grad_to_params
from .net import (
    SIGMA_SCALE,
    ArchConfig,
    ModelParams,
    _col2im,
    _im2col,
    forward,
    init_model,
)

log = logging.getLogger(__name__)

TAU_KEYS = ("tau0", "tau1")


class NonFiniteError(FloatingPointError):
    pass


class StaleCacheError(RuntimeError):
    pass


def mse_loss(xhat, x) -> float:
    """Sum of squared errors over all pixels (and the batch)."""
    xhat, x = np.asarray(xhat), np.asarray(x)
    if xhat.shape != x.shape:
        raise ValueError(f"shape mismatch: {xhat.shape} vs {x.shape}")
    d = xhat - x
    return float(np.vdot(d, d))


def mse_grad(xhat, x) -> np.ndarray:
    return 2.0 * (np.asarray(xhat) - np.asarray(x))


def backward(theta: ModelParams, cache, grad_out) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every stored parameter array.

    ``grad_out`` is dL/dxhat with the shape ``forward`` returned.  Tied
    families receive the sum of their per-layer gradients.
    """
    if cache is None:
        raise StaleCacheError("backward needs a cache from forward(..., keep_cache=True)")
    if cache.filters is not theta.filters:
        raise StaleCacheError("cache was produced with filters that are no longer current")
    c = theta.config
    s, P, K = c.stride, c.P, c.K
    f = cache.filters
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        g = g[None]
    N, H, W = cache.y.shape
    if g.shape[-2:] != (H, W):
        gp = np.zeros((N, H, W))
        gp[:, :g.shape[-2], :g.shape[-1]] = g
        g = gp

    M = c.M
    h, w = cache.code_shape
    Af, Bf, Df = (v.reshape(v.shape[:-2] + (P * P,)) for v in (f.A, f.B, f.D))
    g = g.astype(Df.dtype, copy=False)
    cols = _im2col(g, P, s)
    dD = (cache.z[-1].reshape(-1, M).T @ cols.T).reshape(M, P, P)
    dz = (cols.T @ Df.T).reshape(N, h * w, M)
    dA = np.zeros_like(f.A)
    dB = np.zeros_like(f.B)
    dtau = np.zeros((N, K, M))
    for k in range(K - 1, -1, -1):
        znext = cache.z[k + 1]
        # soft-threshold passes gradient exactly where its output is non-zero
        du = np.where(znext != 0, dz, 0)
        dtau[:, k] = -(du * np.sign(znext)).sum(axis=1)
        duf = du.reshape(-1, M)
        dA[k] = -(duf.T @ cache.cols[k].T).reshape(M, P, P)
        dz = du
        if k > 0:
            dr = -_col2im(Af[k].T @ duf.T, N, h, w, P, s)
            cols = _im2col(dr, P, s)
            dB[k] = (cache.z[k].reshape(-1, M).T @ cols.T).reshape(M, P, P)
            dz = dz + (cols.T @ Bf[k].T).reshape(N, h * w, M)

    grads = {}
    for bank, taps in (("A", dA), ("B", dB)):
        gp = filter_grad_to_params(theta.bank_params(bank), taps)
        for fam, sl in FAMILIES.items():
            gf = gp[..., sl]
            if fam in c.tie:
                gf = gf.sum(axis=0, keepdims=True)
            grads[f"{bank}.{fam}"] = gf
    grads["D"] = filter_grad_to_params(theta.arrays["D"], dD)
    tied = "thresholds" in c.tie
    g0 = dtau.sum(axis=0)
    grads["tau0"] = g0.sum(axis=0, keepdims=True) if tied else g0
    if c.adaptive:
        g1 = np.einsum("nkm,n->km", dtau, cache.sigma / SIGMA_SCALE)
        grads["tau1"] = g1.sum(axis=0, keepdims=True) if tied else g1
    return grads


def loss_and_grad(theta: ModelParams, y, x, sigma):
    xhat, cache = forward(theta, y, sigma, keep_cache=True)
    return mse_loss(xhat, x), backward(theta, cache, mse_grad(xhat, x))


# --- optimizer ------------------------------------------------------------

@dataclass
class Schedule:
    """Cosine decay from ``lr`` to ``lr_min`` over ``total`` steps, per parameter group."""

    lr_gabor: float = 1e-3
    lr_tau: float = 1e-4
    lr_min: float = 1e-6
    total: int = 0  # 0 disables decay

    def factor(self, step: int) -> float:
        if self.total <= 0:
            return 1.0
        t = min(step, self.total) / self.total
        return 0.5 * (1.0 + math.cos(math.pi * t))

    def rates(self, step: int) -> tuple[float, float]:
        f = self.factor(step)
        return (self.lr_min + (self.lr_gabor - self.lr_min) * f,
                self.lr_min + (self.lr_tau - self.lr_min) * f)


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(theta: ModelParams, grads: dict, state: OptimState, schedule: Schedule):
    """One Adam update, then project thresholds onto >= 0 and re-realize the filters."""
    for k, g in grads.items():
        if k not in theta.arrays or g.shape != theta.arrays[k].shape:
            raise ValueError(f"gradient {k} does not match the parameters")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {k} at step {state.step + 1}")
    state.step += 1
    t = state.step
    lr_g, lr_t = schedule.rates(t - 1)
    b1, b2 = state.beta1, state.beta2
    for k, g in grads.items():
        m = state.m.setdefault(k, np.zeros_like(g))
        v = state.v.setdefault(k, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        lr = lr_t if k in TAU_KEYS else lr_g
        theta.arrays[k] -= lr * mhat / (np.sqrt(vhat) + state.eps)
    for k in TAU_KEYS:
        if k in theta.arrays:
            np.maximum(theta.arrays[k], 0.0, out=theta.arrays[k])
    theta.refresh()
    return theta, state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# --- training loop --------------------------------------------------------

@dataclass
class TrainSettings:
    sigma_lo: float = 25.0
    sigma_hi: float = 25.0
    batch: int = 8
    crop: int = 64
    steps: int = 20000
    seed: int = 0
    lr_gabor: float = 1e-3
    lr_tau: float = 1e-4
    lr_min: float = 1e-6
    clip: float = 100.0
    val_every: int = 500
    log_every: int = 100
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0 <= self.sigma_lo <= self.sigma_hi <= 255:
            raise ValueError("need 0 <= sigma_lo <= sigma_hi <= 255")
        for name in ("batch", "crop", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def sample_sigmas(seed: int, index, lo: float, hi: float) -> np.ndarray:
    """Per-sample noise levels drawn uniformly from [lo, hi]."""
    index = np.atleast_1d(index)
    return np.array([lo + (hi - lo) * data.stream(seed, data.STREAM_SIGMA, i).random()
                     for i in index])


def make_batch(images, settings: TrainSettings, step: int):
    """Clean crops, noisy crops and noise levels of one minibatch, keyed by (seed, sample index)."""
    b, size, seed = settings.batch, settings.crop, settings.seed
    clean = np.empty((b, size, size))
    noisy = np.empty_like(clean)
    base = step * b
    sig = sample_sigmas(seed, range(base, base + b), settings.sigma_lo, settings.sigma_hi)
    for j in range(b):
        rng = data.stream(seed, data.STREAM_PATCH, base + j)
        img = images[int(rng.integers(0, len(images)))]
        clean[j] = data.sample_patch(img, size, rng)
        noisy[j] = data.add_awgn(clean[j], sig[j], data.stream(seed, data.STREAM_NOISE, base + j))
    return clean, noisy, sig


def validation_psnr(theta: ModelParams, images, sigma: float, seed: int) -> float:
    from .evaluate import psnr

    vals = []
    for i, x in enumerate(images):
        y = data.add_awgn(x, sigma, data.stream(seed, data.STREAM_VAL, i))
        vals.append(psnr(x, forward(theta, y, sigma)[0]))
    return float(np.mean(vals))


@dataclass
class TrainResult:
    theta: ModelParams
    records: list
    best_step: int
    best_val: float


def format_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def train(config: ArchConfig, images, settings: TrainSettings, val_images=None,
          sink=None) -> TrainResult:
    """Train from a fresh initialization on the given clean images.

    ``sink`` receives one formatted log line per record.  The returned model
    is the best-validation checkpoint when validation images are given.
    """
    if not images:
        raise ValueError("training set is empty")
    images = [np.asarray(im, dtype=np.float64) for im in images]
    theta = init_model(config, data.stream(settings.seed, data.STREAM_INIT))
    theta.refresh(np.dtype(settings.precision).type)
    state = OptimState()
    sched = Schedule(settings.lr_gabor, settings.lr_tau, settings.lr_min, settings.steps)
    val_sigma = 0.5 * (settings.sigma_lo + settings.sigma_hi)
    records = []
    best = (-math.inf, 0, theta.copy())

    def emit(rec):
        records.append(rec)
        if sink is not None:
            sink(format_record(rec))

    if settings.sigma_lo == settings.sigma_hi:
        emit({"event": "banner", "regime": "-S", "sigma": settings.sigma_lo})
    else:
        emit({"event": "banner", "regime": "adaptive" if config.adaptive else "-B",
              "sigma_lo": settings.sigma_lo, "sigma_hi": settings.sigma_hi})

    t0 = time.perf_counter()
    window = []
    clips = 0
    for step in range(settings.steps):
        clean, noisy, sig = make_batch(images, settings, step)
        xhat, cache = forward(theta, noisy, sig, keep_cache=True)
        loss = mse_loss(xhat, clean)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at iteration {step}")
        # clip the gradient of the per-sample mean loss; Adam is scale-free otherwise
        grads = backward(theta, cache, mse_grad(xhat, clean) / settings.batch)
        clips += clip_global_norm(grads, settings.clip) > settings.clip
        lr_g, _ = sched.rates(state.step)
        optimizer_step(theta, grads, state, sched)
        window.append(loss / settings.batch)
        done = step + 1
        val = None
        if val_images and (done % settings.val_every == 0 or done == settings.steps):
            val = validation_psnr(theta, val_images, val_sigma, settings.seed)
            if val > best[0]:
                best = (val, done, theta.copy())
        if done % settings.log_every == 0 or done == settings.steps or val is not None:
            emit({"step": done, "loss": float(np.mean(window)), "lr": lr_g,
                  "val_psnr": val if val is not None else float("nan"), "clipped": clips,
                  "wall_ms": int((time.perf_counter() - t0) * 1000)})
            window = []
            clips = 0

    if val_images:
        theta = best[2]
        theta.refresh(np.float64)
        return TrainResult(theta, records, best[1], best[0])
    theta.refresh(np.float64)
    return TrainResult(theta, records, settings.steps, float("nan"))
