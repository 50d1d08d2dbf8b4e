"""Finite-difference verification of :func:`gdlnet.train.backward`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gabor import FAMILIES, init_filterbank
from .net import ArchConfig, ModelParams, forward
from .train import backward, mse_grad

# the checker refuses architectures with K * M * P^2 beyond this
BUDGET = 4096
EXTENDED = np.longdouble


@dataclass
class CheckReport:
    worst: dict = field(default_factory=dict)  # family -> worst relative error
    where: dict = field(default_factory=dict)  # family -> (key, index, analytic, numeric)
    kinks: int = 0
    checked: int = 0

    def worst_overall(self) -> float:
        return max(self.worst.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst_overall() <= tol


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def family_of(key: str) -> str:
    return key.split(".", 1)[1] if "." in key else key


def random_model(config: ArchConfig, rng: np.random.Generator) -> ModelParams:
    """Independent random filterbanks per layer, with non-trivial thresholds."""
    K, M, S, P = config.K, config.M, config.S, config.P

    def bank():
        p = init_filterbank(rng, M, S, P).params
        p[..., 0] = rng.uniform(0.05, 0.2, size=(M, S)) * rng.choice([-1.0, 1.0], size=(M, S))
        return p

    A = np.stack([bank() for _ in range(K)])
    B = np.stack([bank() for _ in range(K)])
    tau0 = rng.uniform(0.01, 0.05, size=(K, M))
    tau1 = rng.uniform(0.02, 0.1, size=(K, M))
    return ModelParams.from_layers(config, A, B, bank(), tau0, tau1)


def random_problem(config: ArchConfig, rng: np.random.Generator, size: int = 32, batch: int = 2):
    """Smooth-ish clean images, their noisy versions and per-sample noise levels."""
    x = rng.random((batch, size, size))
    # cheap separable smoothing so images are not white noise
    for ax in (1, 2):
        x = (x + np.roll(x, 1, axis=ax) + np.roll(x, -1, axis=ax)) / 3
    sigma = rng.uniform(10, 50, size=batch)
    y = x + sigma[:, None, None] / 255 * rng.standard_normal(x.shape)
    return y, x, sigma


def _run(theta, y, sigma):
    xhat, cache = forward(theta, y, sigma, keep_cache=True)
    masks = [np.abs(u) > cache.tau[:, k][:, None, :] for k, u in enumerate(cache.u)]
    return xhat, masks


def _same(m1, m2) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(m1, m2))


def finite_difference(theta: ModelParams, y, x, sigma, key: str, idx, h: float = 1e-6,
                      base=None, dtype=EXTENDED):
    """Central difference of the squared-error loss along one coordinate.

    The perturbed forward passes run in ``dtype`` (extended precision by
    default) so that rounding does not swamp small gradients.  Returns
    ``(value, crossed)``.  If the soft-threshold activity pattern changes
    inside [-h, h], the central difference straddles a kink; the one-sided
    second-order formula on the side that keeps the pattern of the
    unperturbed point is used instead and ``crossed`` is True.
    """
    arr = theta.arrays[key]
    old = arr[idx]
    y, x = np.asarray(y, dtype=dtype), np.asarray(x, dtype=dtype)

    def run(mult):
        arr[idx] = old + mult * h
        theta.refresh(dtype)
        return _run(theta, y, sigma)

    def dloss(a, b):
        # difference of squares without forming the large loss values
        return float(np.vdot(a - b, a + b - 2 * x))

    # the step actually taken after rounding the perturbed parameter
    step = float((np.float64(old) + h) - np.float64(old))
    try:
        x0, m0 = base if base is not None else run(0.0)
        xp, mp = run(1.0)
        xm, mm = run(-1.0)
        if _same(mp, m0) and _same(mm, m0):
            return dloss(xp, xm) / (2 * step), False
        for sgn, (x1, m1) in ((1.0, (xp, mp)), (-1.0, (xm, mm))):
            if not _same(m1, m0):
                continue
            x2, m2 = run(2 * sgn)
            if _same(m2, m0):
                return sgn * (4 * dloss(x1, x0) - dloss(x2, x0)) / (2 * step), True
        return float("nan"), True
    finally:
        arr[idx] = old
        theta.refresh(np.float64)


def check_gradients(theta: ModelParams, y, x, sigma, h: float = 1e-6,
                    keys=None, backward_fn=backward) -> CheckReport:
    """Compare every coordinate of the backward pass with finite differences."""
    xhat, cache = forward(theta, y, sigma, keep_cache=True)
    grads = backward_fn(theta, cache, mse_grad(xhat, x))
    report = CheckReport()
    theta.refresh(EXTENDED)
    base = _run(theta, np.asarray(y, dtype=EXTENDED), sigma)
    theta.refresh(np.float64)
    for key in keys or theta.arrays:
        fam = family_of(key)
        for idx in np.ndindex(theta.arrays[key].shape):
            num, crossed = finite_difference(theta, y, x, sigma, key, idx, h, base)
            report.kinks += crossed
            report.checked += 1
            err = rel_error(float(grads[key][idx]), num) if np.isfinite(num) else np.inf
            if err >= report.worst.get(fam, -1.0):
                report.worst[fam] = err
                report.where[fam] = (key, idx, float(grads[key][idx]), num)
    return report


def tied_consistency(config: ArchConfig, rng: np.random.Generator, size: int = 32) -> float:
    """Worst relative gap between tied gradients and sums of untied per-layer gradients.

    Both models hold identical values, so the tied gradient must be the
    sum over layers of the untied one.
    """
    from .train import loss_and_grad

    untied_cfg = ArchConfig(config.K, config.M, config.stride, config.P, config.S,
                            config.adaptive, frozenset())
    base = random_model(untied_cfg, rng)
    # make tied families equal across layers so both parameterizations coincide
    A, B = base.bank_params("A"), base.bank_params("B")
    tau0, tau1 = base.tau(0).copy(), base.tau(1).copy()
    for fam, sl in FAMILIES.items():
        if fam in config.tie:
            A[..., sl] = A[:1, ..., sl]
            B[..., sl] = B[:1, ..., sl]
    if "thresholds" in config.tie:
        tau0[:] = tau0[:1]
        tau1[:] = tau1[:1]
    untied = ModelParams.from_layers(untied_cfg, A, B, base.arrays["D"], tau0, tau1)
    tied = ModelParams.from_layers(config, A, B, base.arrays["D"], tau0, tau1)
    y, x, sigma = random_problem(config, rng, size)
    _, gu = loss_and_grad(untied, y, x, sigma)
    _, gt = loss_and_grad(tied, y, x, sigma)
    worst = 0.0
    for key, g in gt.items():
        ref = gu[key].sum(axis=0, keepdims=True) if g.shape != gu[key].shape else gu[key]
        scale = max(np.abs(ref).max(), 1e-12)
        worst = max(worst, float(np.abs(g - ref).max() / scale))
    return worst


def within_budget(config: ArchConfig) -> bool:
    return config.K * config.M * config.P**2 <= BUDGET
