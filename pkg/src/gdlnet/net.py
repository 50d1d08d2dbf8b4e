"""Unrolled convolutional ISTA with Gabor-generated filterbanks.

Images are arrays of shape (H, W) or (N, H, W); sparse codes are
(M, h, w) or (N, M, h, w) with h = H / stride.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gabor import FAMILIES, N_PARAMS, FilterbankSpec, RealizedFilterbank, eval_filterbank

TIE_FAMILIES = ("alpha", "a", "omega0", "psi", "thresholds")
BANKS = ("A", "B")
SIGMA_SCALE = 255.0


def _weights(fb) -> np.ndarray:
    return fb.weights if isinstance(fb, RealizedFilterbank) else np.asarray(fb)


def _im2col(x: np.ndarray, P: int, s: int) -> np.ndarray:
    """Columns of the zero-padded, strided P x P windows: (P*P, N*h*w) for x of shape (N, H, W)."""
    N, H, W = x.shape
    r = (P - 1) // 2
    h, w = H // s, W // s
    xp = np.zeros((N, H + 2 * r, W + 2 * r), dtype=x.dtype)
    xp[:, r:r + H, r:r + W] = x
    cols = np.empty((P, P, N, h, w), dtype=x.dtype)
    for p in range(P):
        for q in range(P):
            cols[p, q] = xp[:, p:p + s * h:s, q:q + s * w:s]
    return cols.reshape(P * P, N * h * w)


def _col2im(cols: np.ndarray, N: int, h: int, w: int, P: int, s: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to an (N, s*h, s*w) image."""
    r = (P - 1) // 2
    H, W = s * h, s * w
    cols = cols.reshape(P, P, N, h, w)
    out = np.zeros((N, H + 2 * r, W + 2 * r), dtype=cols.dtype)
    for p in range(P):
        for q in range(P):
            out[:, p:p + s * h:s, q:q + s * w:s] += cols[p, q]
    return out[:, r:r + H, r:r + W]


def _check_divisible(H: int, W: int, s: int) -> None:
    if H % s or W % s:
        raise ValueError(f"image size {H}x{W} is not divisible by stride {s}")


def _flat_image(img):
    img = np.asarray(img)
    if img.ndim < 2:
        raise ValueError(f"expected an image, got shape {img.shape}")
    return img.reshape((-1,) + img.shape[-2:]), img.shape[:-2]


def analysis_conv(img, fb, s: int) -> np.ndarray:
    """Stride-s correlation of an image with each filter (the A^T operator).

    ``img`` is (..., H, W); the result is (..., M, H/s, W/s).
    """
    Wt = _weights(fb)
    x, lead = _flat_image(img)
    N, H, W = x.shape
    _check_divisible(H, W, s)
    M, P = Wt.shape[0], Wt.shape[-1]
    h, w = H // s, W // s
    z = _im2col(x, P, s).T @ Wt.reshape(M, P * P).T  # (N*h*w, M)
    return np.moveaxis(z.reshape(N, h, w, M), -1, 1).reshape(lead + (M, h, w))


def synthesis_conv(z, fb, s: int) -> np.ndarray:
    """Adjoint of :func:`analysis_conv`: transposed strided correlation summed over subbands."""
    Wt = _weights(fb)
    z = np.asarray(z)
    if z.ndim < 3:
        raise ValueError(f"expected subbands of shape (..., M, h, w), got {z.shape}")
    M, h, w = z.shape[-3:]
    if Wt.shape[0] != M:
        raise ValueError(f"code has {M} subbands but filterbank has {Wt.shape[0]}")
    lead = z.shape[:-3]
    zf = np.moveaxis(z.reshape((-1, M, h, w)), 1, -1).reshape(-1, M)
    N = zf.shape[0] // (h * w)
    P = Wt.shape[-1]
    out = _col2im(Wt.reshape(M, P * P).T @ zf.T, N, h, w, P, s)
    return out.reshape(lead + out.shape[-2:])


def filter_grad(img, dcode, P: int, s: int) -> np.ndarray:
    """Gradient w.r.t. the taps of ``analysis_conv(img, W, s)`` given the code gradient.

    Also the tap gradient of ``synthesis_conv(dcode, W, s)`` given the image
    gradient ``img``.  Returns (M, P, P); leading batch axes are summed.
    """
    x, _ = _flat_image(img)
    dcode = np.asarray(dcode)
    M, h, w = dcode.shape[-3:]
    dz = np.moveaxis(dcode.reshape((-1, M, h, w)), 1, -1).reshape(-1, M)
    return (dz.T @ _im2col(x, P, s).T).reshape(M, P, P)


def _shrink(u: np.ndarray, t: np.ndarray) -> np.ndarray:
    c = np.minimum(u, t)
    np.maximum(c, -t, out=c)
    return u - c


def soft_threshold(z, tau) -> np.ndarray:
    """sign(z) * max(0, |z| - tau) with ``tau`` indexed by subband.

    ``z`` is (..., M, h, w) and ``tau`` broadcasts against its leading (..., M) axes.
    """
    z = np.asarray(z)
    tau = np.asarray(tau, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    if np.any(tau < 0):
        raise ValueError("thresholds must be non-negative")
    return _shrink(z, tau[..., None, None])


@dataclass(frozen=True)
class ArchConfig:
    K: int
    M: int
    stride: int
    P: int
    S: int
    adaptive: bool = False
    tie: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "tie", frozenset(self.tie))
        for name in ("K", "M", "S"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.P < 1 or self.P % 2 == 0:
            raise ValueError(f"P must be a positive odd integer, got {self.P}")
        if self.stride not in (1, 2, 4):
            raise ValueError(f"stride must be 1, 2 or 4, got {self.stride}")
        bad = self.tie - set(TIE_FAMILIES)
        if bad:
            raise ValueError(f"unknown tie families: {sorted(bad)}")


def _layer_dim(config: ArchConfig, family: str) -> int:
    return 1 if family in config.tie else config.K


def param_shapes(config: ArchConfig) -> dict[str, tuple]:
    """Storage shape of every learnable array, in serialization order."""
    M, S = config.M, config.S
    shapes = {}
    for bank in BANKS:
        for fam, sl in FAMILIES.items():
            shapes[f"{bank}.{fam}"] = (_layer_dim(config, fam), M, S, sl.stop - sl.start)
    shapes["D"] = (M, S, N_PARAMS)
    kt = _layer_dim(config, "thresholds")
    shapes["tau0"] = (kt, M)
    if config.adaptive:
        shapes["tau1"] = (kt, M)
    return shapes


def count_params(config: ArchConfig, adaptive: bool | None = None) -> int:
    """Learnable parameter count, tied groups counted once."""
    if adaptive is not None and adaptive != config.adaptive:
        config = ArchConfig(config.K, config.M, config.stride, config.P, config.S,
                            adaptive, config.tie)
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


@dataclass
class LayerParams:
    phi_A: FilterbankSpec
    phi_B: FilterbankSpec
    tau0: np.ndarray
    tau1: np.ndarray


@dataclass
class Filters:
    A: np.ndarray  # (K, M, P, P)
    B: np.ndarray
    D: np.ndarray  # (M, P, P)


class ModelParams:
    """All learnable arrays of a model.

    Tied families are stored once with a leading layer axis of length 1 and
    broadcast to every layer.
    """

    def __init__(self, config: ArchConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        shapes = param_shapes(config)
        if set(arrays) != set(shapes):
            raise ValueError(f"expected arrays {sorted(shapes)}, got {sorted(arrays)}")
        self.arrays = {}
        for k, shp in shapes.items():
            a = np.array(arrays[k], dtype=np.float64)
            if a.shape != shp:
                raise ValueError(f"{k}: expected shape {shp}, got {a.shape}")
            self.arrays[k] = a
        self._filters: Filters | None = None
        self.dtype = np.float64

    @classmethod
    def from_layers(cls, config: ArchConfig, phi_A, phi_B, phi_D, tau0, tau1=None):
        """Build from full per-layer arrays: phi_A/phi_B (K, M, S, 6), tau (K, M).

        Tied families take layer 0's values.
        """
        arrays = {}
        for bank, full in (("A", phi_A), ("B", phi_B)):
            full = np.asarray(full, dtype=np.float64)
            for fam, sl in FAMILIES.items():
                v = full[..., sl]
                arrays[f"{bank}.{fam}"] = v[:1] if fam in config.tie else v
        arrays["D"] = np.asarray(phi_D, dtype=np.float64)
        tied = "thresholds" in config.tie
        tau0 = np.asarray(tau0, dtype=np.float64)
        arrays["tau0"] = tau0[:1] if tied else tau0
        if config.adaptive:
            tau1 = np.zeros_like(tau0) if tau1 is None else np.asarray(tau1, dtype=np.float64)
            arrays["tau1"] = tau1[:1] if tied else tau1
        return cls(config, arrays)

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})
        out.dtype = self.dtype
        return out

    def bank_params(self, bank: str) -> np.ndarray:
        """Gabor parameters of every layer of bank 'A' or 'B': (K, M, S, 6)."""
        c = self.config
        out = np.empty((c.K, c.M, c.S, N_PARAMS))
        for fam, sl in FAMILIES.items():
            out[..., sl] = self.arrays[f"{bank}.{fam}"]
        return out

    def tau(self, which: int = 0) -> np.ndarray:
        """Per-layer threshold offsets (which=0) or noise slopes (which=1): (K, M)."""
        K, M = self.config.K, self.config.M
        key = f"tau{which}"
        if key not in self.arrays:
            return np.zeros((K, M))
        return np.broadcast_to(self.arrays[key], (K, M))

    def layer(self, k: int) -> LayerParams:
        P = self.config.P
        return LayerParams(
            FilterbankSpec(self.bank_params("A")[k], P),
            FilterbankSpec(self.bank_params("B")[k], P),
            self.tau(0)[k].copy(),
            self.tau(1)[k].copy(),
        )

    @property
    def phi_D(self) -> FilterbankSpec:
        return FilterbankSpec(self.arrays["D"], self.config.P)

    @property
    def filters(self) -> Filters:
        if self._filters is None:
            self.refresh()
        return self._filters

    def refresh(self, dtype=None) -> Filters:
        """Re-realize every filter tap from the current Gabor parameters.

        ``dtype`` sets the compute precision of subsequent forward passes;
        parameters themselves are always stored in float64.
        """
        if dtype is not None:
            self.dtype = dtype
        dtype = self.dtype
        P = self.config.P
        self._filters = Filters(
            eval_filterbank(self.bank_params("A"), P, dtype),
            eval_filterbank(self.bank_params("B"), P, dtype),
            eval_filterbank(self.arrays["D"], P, dtype),
        )
        return self._filters

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays.values())


def layer_thresholds(lp: LayerParams, sigma) -> np.ndarray:
    """tau0 + tau1 * sigma / 255 with sigma on the 0-255 scale."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("noise level must be non-negative")
    return lp.tau0 + lp.tau1 * (sigma[..., None] / SIGMA_SCALE)


def thresholds(theta: ModelParams, sigma, dtype=np.float64) -> np.ndarray:
    """Thresholds of every layer for a batch of noise levels: (N, K, M)."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=dtype))
    if np.any(sigma < 0):
        raise ValueError("noise level must be non-negative")
    tau0, tau1 = theta.tau(0).astype(dtype), theta.tau(1).astype(dtype)
    return tau0[None] + tau1[None] * (sigma[:, None, None] / SIGMA_SCALE)


def init_model(config: ArchConfig, rng: np.random.Generator, tau0: float = 1e-2,
               probe_shape=(32, 32)) -> ModelParams:
    """One random Gabor draw shared by every filterbank, scaled to unit spectral norm."""
    from .gabor import init_filterbank, normalize_scales, spectral_norm

    spec = init_filterbank(rng, config.M, config.S, config.P)
    L = spectral_norm(spec.realize(), config.stride, probe_shape=probe_shape, rng=rng)
    spec = normalize_scales(spec, L)
    K, M = config.K, config.M
    full = np.broadcast_to(spec.params, (K,) + spec.params.shape)
    return ModelParams.from_layers(
        config, full, full, spec.params.copy(),
        np.full((K, M), tau0), np.zeros((K, M)),
    )


def _reflect_to_multiple(y: np.ndarray, s: int):
    H, W = y.shape[-2:]
    ph, pw = (-H) % s, (-W) % s
    if ph == 0 and pw == 0:
        return y, (H, W)
    mode = "reflect" if min(H, W) > max(ph, pw) else "symmetric"
    return np.pad(y, [(0, 0)] * (y.ndim - 2) + [(0, ph), (0, pw)], mode=mode), (H, W)


@dataclass
class ForwardCache:
    """Everything the backward pass needs.

    Codes are stored flat and channels-last, (N, h*w, M); ``cols[k]`` holds
    the im2col columns of the residual B z - y of layer k.
    """

    y: np.ndarray            # padded input, (N, H, W)
    sigma: np.ndarray        # (N,)
    tau: np.ndarray          # (N, K, M)
    z: list                  # z^(0) .. z^(K)
    u: list                  # pre-threshold activations of each layer
    cols: list
    filters: Filters
    code_shape: tuple        # (h, w)
    out_shape: tuple
    squeeze: bool = False

    def code(self, k: int) -> np.ndarray:
        """z^(k) as (N, M, h, w)."""
        z = self.z[k]
        N, _, M = z.shape
        return np.moveaxis(z.reshape((N,) + self.code_shape + (M,)), -1, 1)


def forward(theta: ModelParams, y, sigma=0.0, keep_cache: bool = False):
    """Run the K unrolled ISTA layers and synthesize with the final dictionary.

    ``y`` is (H, W) or (N, H, W); ``sigma`` a scalar or one level per image.
    Returns ``(xhat, cache)``; ``cache`` is None unless ``keep_cache``.
    """
    c = theta.config
    if c.K < 1:
        raise ValueError("model needs at least one layer")
    f = theta.filters
    dtype = f.D.dtype
    y = np.asarray(y, dtype=dtype)
    squeeze = y.ndim == 2
    if squeeze:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) input, got shape {y.shape}")
    s, P, M = c.stride, c.P, c.M
    y, orig = _reflect_to_multiple(y, s)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (y.shape[0],)).copy()
    tau = thresholds(theta, sigma, dtype)
    N, H, W = y.shape
    h, w = H // s, W // s
    Af, Bf, Df = (v.reshape(v.shape[:-2] + (P * P,)) for v in (f.A, f.B, f.D))
    z = np.zeros((N, h * w, M), dtype=dtype)
    zs, us, cs = [z], [], []
    for k in range(c.K):
        # B z^(0) = 0 exactly
        r = -y if k == 0 else _col2im(Bf[k].T @ z.reshape(-1, M).T, N, h, w, P, s) - y
        cols = _im2col(r, P, s)
        u = z - (cols.T @ Af[k].T).reshape(N, h * w, M)
        z = _shrink(u, tau[:, k][:, None, :])
        if keep_cache:
            zs.append(z)
            us.append(u)
            cs.append(cols)
    xhat = _col2im(Df.T @ z.reshape(-1, M).T, N, h, w, P, s)[:, :orig[0], :orig[1]]
    cache = None
    if keep_cache:
        cache = ForwardCache(y, sigma, tau, zs, us, cs, f, (h, w), orig, squeeze)
    if squeeze:
        xhat = xhat[0]
    return xhat, cache


def denoise(theta: ModelParams, y, sigma=0.0) -> np.ndarray:
    return forward(theta, y, sigma)[0]
