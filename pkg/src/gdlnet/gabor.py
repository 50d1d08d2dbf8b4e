"""Gabor and mixture-of-Gabor filterbanks.

A filterbank is described by an ``(M, S, 6)`` array of atom parameters
``(alpha, a1, a2, w1, w2, psi)`` and an odd filter size ``P``.  Filters are
evaluated on the centered integer lattice, ``x = (col - c, row - c)`` with
``c = (P - 1) / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_PARAMS = 6
ALPHA, A1, A2, W1, W2, PSI = range(N_PARAMS)

# column slices of the parameter axis, by family
FAMILIES = {
    "alpha": slice(0, 1),
    "a": slice(1, 3),
    "omega0": slice(3, 5),
    "psi": slice(5, 6),
}


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaborParams:
    """A single Gabor atom."""

    alpha: float
    a: tuple[float, float]
    omega0: tuple[float, float]
    psi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, *self.a, *self.omega0, self.psi], dtype=np.float64)

    @classmethod
    def from_array(cls, v) -> "GaborParams":
        v = [float(t) for t in v]
        return cls(v[0], (v[1], v[2]), (v[3], v[4]), v[5])


@dataclass
class FilterbankSpec:
    """``M`` subbands of ``S`` Gabor atoms, realized at size ``P``."""

    params: np.ndarray  # (M, S, 6)
    filter_size: int

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 3 or self.params.shape[2] != N_PARAMS:
            raise ValueError(f"params must have shape (M, S, 6), got {self.params.shape}")
        if self.params.shape[0] < 1 or self.params.shape[1] < 1:
            raise ValueError("need M >= 1 and S >= 1")
        _check_size(self.filter_size)

    @property
    def num_subbands(self) -> int:
        return self.params.shape[0]

    @property
    def order(self) -> int:
        return self.params.shape[1]

    @property
    def num_params(self) -> int:
        return self.params.size

    def to_flat(self) -> np.ndarray:
        """Subband-major, atom-minor flat layout of 6*S*M doubles."""
        return self.params.reshape(-1).copy()

    @classmethod
    def from_flat(cls, flat, M: int, S: int, P: int) -> "FilterbankSpec":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != N_PARAMS * S * M:
            raise ValueError(f"expected {N_PARAMS * S * M} values, got {flat.size}")
        return cls(flat.reshape(M, S, N_PARAMS).copy(), P)

    def realize(self) -> "RealizedFilterbank":
        return RealizedFilterbank(eval_filterbank(self.params, self.filter_size), self)


@dataclass
class RealizedFilterbank:
    weights: np.ndarray  # (M, P, P)
    spec: FilterbankSpec | None = None

    @property
    def num_subbands(self) -> int:
        return self.weights.shape[0]


def _check_size(P) -> None:
    if int(P) != P or P < 1 or P % 2 == 0:
        raise ValueError(f"filter size must be a positive odd integer, got {P}")


def lattice(P: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Centered lattice coordinates ``(x1, x2)``, each of shape (P, P)."""
    _check_size(P)
    c = (P - 1) // 2
    r = np.arange(P, dtype=dtype) - c
    x2, x1 = np.meshgrid(r, r, indexing="ij")
    return x1, x2


def _pieces(params: np.ndarray, P: int):
    x1, x2 = lattice(P, params.dtype)
    p = params[..., None, None]
    alpha, a1, a2 = p[..., ALPHA, :, :], p[..., A1, :, :], p[..., A2, :, :]
    w1, w2, psi = p[..., W1, :, :], p[..., W2, :, :], p[..., PSI, :, :]
    env = np.exp(-((a1 * x1) ** 2 + (a2 * x2) ** 2))
    phase = w1 * x1 + w2 * x2 + psi
    return x1, x2, alpha, a1, a2, env, phase


def eval_filterbank(params, P: int, dtype=np.float64) -> np.ndarray:
    """Realize MoG filters for parameters of shape (..., S, 6) -> (..., P, P)."""
    params = np.asarray(params, dtype=dtype)
    _, _, alpha, _, _, env, phase = _pieces(params, P)
    # scale applied last so that the filter is exactly linear in alpha
    return (alpha * (env * np.cos(phase))).sum(axis=-3)


def eval_gabor(phi, P: int) -> np.ndarray:
    """Evaluate one Gabor atom on the P x P centered lattice."""
    v = phi.as_array() if isinstance(phi, GaborParams) else np.asarray(phi, dtype=np.float64)
    _, _, alpha, _, _, env, phase = _pieces(v, P)
    return alpha * (env * np.cos(phase))


def eval_mog(atoms, P: int) -> np.ndarray:
    """Sum of Gabor atoms; ``atoms`` is a sequence of GaborParams or an (S, 6) array."""
    if isinstance(atoms, np.ndarray):
        arr = atoms.reshape(-1, N_PARAMS) if atoms.size else atoms.reshape(0, N_PARAMS)
    else:
        arr = np.array([a.as_array() if isinstance(a, GaborParams) else a for a in atoms],
                       dtype=np.float64).reshape(-1, N_PARAMS)
    if arr.shape[0] == 0:
        raise ValueError("mixture of Gabor needs at least one atom")
    _check_size(P)
    return eval_filterbank(arr, P)


def grad_filterbank(params, P: int) -> np.ndarray:
    """Partial derivatives of each atom w.r.t. its six parameters.

    Returns an array of shape (..., S, 6, P, P).
    """
    params = np.asarray(params, dtype=np.float64)
    x1, x2, alpha, a1, a2, env, phase = _pieces(params, P)
    cos, sin = np.cos(phase), np.sin(phase)
    ec = env * cos
    aes = -alpha * env * sin
    g = alpha * ec
    out = np.empty(params.shape[:-1] + (N_PARAMS, P, P))
    out[..., ALPHA, :, :] = ec
    out[..., A1, :, :] = -2.0 * a1 * x1**2 * g
    out[..., A2, :, :] = -2.0 * a2 * x2**2 * g
    out[..., W1, :, :] = aes * x1
    out[..., W2, :, :] = aes * x2
    out[..., PSI, :, :] = aes
    return out


def grad_gabor(phi, P: int) -> tuple[np.ndarray, ...]:
    """(dg/dalpha, dg/da1, dg/da2, dg/dw1, dg/dw2, dg/dpsi), each P x P."""
    v = phi.as_array() if isinstance(phi, GaborParams) else np.asarray(phi, dtype=np.float64)
    d = grad_filterbank(v[None], P)[0]
    return tuple(d[j] for j in range(N_PARAMS))


def filter_grad_to_params(params, tap_grad) -> np.ndarray:
    """Contract dL/d(taps) of shape (..., P, P) into dL/d(params) of shape (..., S, 6)."""
    P = tap_grad.shape[-1]
    d = grad_filterbank(params, P)
    return np.einsum("...sjpq,...pq->...sj", d, tap_grad)


def gabor_fourier(phi, omega, periods: int = 0):
    """Continuous Fourier transform of a Gabor atom at angular frequency ``omega``.

    Two Gaussians of width ``2a`` centered at ``+-omega0`` with peak
    ``alpha * pi / (2 |a1 a2|)``.  ``periods > 0`` adds the aliased copies at
    ``omega + 2 pi k`` for ``|k_i| <= periods``, which is what a DFT of the
    lattice-sampled filter sees.
    """
    v = phi.as_array() if isinstance(phi, GaborParams) else np.asarray(phi, dtype=np.float64)
    alpha, a, w0, psi = v[ALPHA], v[A1:A2 + 1], v[W1:W2 + 1], v[PSI]
    if np.any(a == 0):
        raise ValueError("closed-form spectrum needs non-zero precision components")
    omega = np.asarray(omega, dtype=np.float64)
    width = 2 * a
    peak = alpha * np.pi / abs(a[0] * a[1]) / 2
    total = 0
    shifts = range(-periods, periods + 1)
    for k1 in shifts:
        for k2 in shifts:
            w = omega + 2 * np.pi * np.array([k1, k2])
            gm = np.exp(-np.sum(((w - w0) / width) ** 2, axis=-1))
            gp = np.exp(-np.sum(((w + w0) / width) ** 2, axis=-1))
            total = total + peak * (np.exp(1j * psi) * gm + np.exp(-1j * psi) * gp)
    return total


def init_filterbank(rng: np.random.Generator, M: int, S: int, P: int) -> FilterbankSpec:
    """Random Gabor filterbank with unit scale.

    Precisions are uniform on [0.1, 0.5]; frequencies have uniform magnitude
    on [0, pi] along a uniform random direction; phases are uniform on
    [-pi, pi).
    """
    if M < 1 or S < 1:
        raise ValueError("need M >= 1 and S >= 1")
    _check_size(P)
    params = np.empty((M, S, N_PARAMS))
    params[..., ALPHA] = 1.0
    params[..., A1:A2 + 1] = rng.uniform(0.1, 0.5, size=(M, S, 2))
    mag = rng.uniform(0.0, np.pi, size=(M, S))
    theta = rng.uniform(0.0, 2 * np.pi, size=(M, S))
    params[..., W1] = mag * np.cos(theta)
    params[..., W2] = mag * np.sin(theta)
    params[..., PSI] = rng.uniform(-np.pi, np.pi, size=(M, S))
    return FilterbankSpec(params, P)


def spectral_norm(fb, stride: int, probe_shape=(32, 32), iters: int = 100,
                  tol: float = 1e-6, rng=None, strict: bool = False) -> float:
    """Largest eigenvalue of D^T D by power iteration, i.e. ``||D||_2**2``.

    ``probe_shape`` is the subband-plane size; the image is ``stride`` times
    larger.  With ``strict`` a ConvergenceError is raised when the Rayleigh
    quotient still moves by more than ``tol`` (relative) after ``iters`` steps.
    """
    from .net import analysis_conv, synthesis_conv

    weights = fb.weights if isinstance(fb, RealizedFilterbank) else np.asarray(fb)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    h, w = probe_shape
    rng = np.random.default_rng(0) if rng is None else rng
    z = rng.standard_normal((weights.shape[0], h, w))
    z /= np.linalg.norm(z)
    L = 0.0
    for _ in range(iters):
        v = analysis_conv(synthesis_conv(z, weights, stride), weights, stride)
        L_new = float(np.vdot(z, v))
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        z = v / nv
        if abs(L_new - L) <= tol * abs(L_new):
            return L_new
        L = L_new
    if strict:
        raise ConvergenceError(f"power iteration did not converge in {iters} iterations")
    return L


def normalize_scales(spec: FilterbankSpec, L: float) -> FilterbankSpec:
    """Divide every atom's scale by sqrt(L)."""
    if not L > 0:
        raise ValueError(f"spectral norm must be positive, got {L}")
    params = spec.params.copy()
    params[..., ALPHA] /= np.sqrt(L)
    return FilterbankSpec(params, spec.filter_size)
