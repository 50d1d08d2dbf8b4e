"""Image I/O, manifests, patch sampling and seeded noise."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# stream purposes for per-sample generators
STREAM_PATCH = 1
STREAM_NOISE = 2
STREAM_SIGMA = 3
STREAM_INIT = 4
STREAM_EVAL = 5
STREAM_VAL = 6


class ImageFormatError(ValueError):
    pass


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``.

    Streams with different keys are independent; the same keys always replay
    the same sequence.
    """
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal samples by the Box-Muller transform."""
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    out = np.empty(2 * m)
    out[0::2] = rad * np.cos(ang)
    out[1::2] = rad * np.sin(ang)
    return out[:n].reshape(shape)


def add_awgn(x, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``x`` plus white Gaussian noise of std ``sigma / 255``; never clipped."""
    if sigma < 0:
        raise ValueError(f"noise level must be non-negative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + (sigma / 255.0) * gaussian(rng, x.shape)


# --- images ---------------------------------------------------------------

def _read_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Decode a binary (P5) PGM with maxval 255 into a uint8 array."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic == b"P6":
        raise ImageFormatError(f"{path}: color images are not supported")
    if magic != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {magic!r})")
    vals = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"{path}: malformed PGM header")
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImageFormatError(f"{path}: PNG support needs Pillow") from exc
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1"):
            if im.mode in ("RGB", "RGBA", "LA", "CMYK", "YCbCr"):
                raise ImageFormatError(f"{path}: color images are not supported")
            raise ImageFormatError(f"{path}: unsupported bit depth (mode {im.mode})")
        if im.mode == "P":
            im = im.convert("RGB")
            arr = np.asarray(im)
            if not (np.all(arr[..., 0] == arr[..., 1]) and np.all(arr[..., 1] == arr[..., 2])):
                raise ImageFormatError(f"{path}: color images are not supported")
            return arr[..., 0].copy()
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def load_image(path) -> np.ndarray:
    """8-bit grayscale image scaled to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() == ".png":
        pix = _read_png(path)
    else:
        pix = read_pgm(path)
    return pix.astype(np.float64) / 255.0


def to_uint8(x) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, x) -> None:
    """Clamp to [0, 1], quantize to 8 bits and write PGM (or PNG by suffix)."""
    pix = to_uint8(x)
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(pix, mode="L").save(path)
    else:
        write_pgm(path, pix)


# --- datasets -------------------------------------------------------------

def read_manifest(path) -> list[Path]:
    """Paths listed one per line; '#' starts a comment; relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    out = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else (path.parent / p))
    return out


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


@dataclass
class Dataset:
    paths: list
    split: str = "train"
    _images: list = field(default=None, repr=False)

    @classmethod
    def from_manifest(cls, path, split: str = "train") -> "Dataset":
        return cls(read_manifest(path), split)

    def __len__(self) -> int:
        return len(self.paths)

    def images(self) -> list[np.ndarray]:
        if self._images is None:
            self._images = [load_image(p) for p in self.paths]
        return self._images

    def names(self) -> list[str]:
        return [os.path.basename(str(p)) for p in self.paths]


def check_disjoint(*datasets: Dataset) -> None:
    seen = {}
    for ds in datasets:
        for p in ds.paths:
            key = os.path.realpath(p)
            if key in seen and seen[key] != ds.split:
                raise ValueError(f"{p} appears in both {seen[key]} and {ds.split} splits")
            seen[key] = ds.split


# --- patches --------------------------------------------------------------

def augment(x: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 flips/rotations of the square's symmetry group (code 0 is identity)."""
    if code & 4:
        x = x.T
    return np.rot90(x, code & 3)


def sample_patch(x, size: int, rng: np.random.Generator, augment_patch: bool = True) -> np.ndarray:
    """Uniformly placed ``size`` x ``size`` crop, optionally flipped/rotated."""
    x = np.asarray(x)
    H, W = x.shape
    if H < size or W < size:
        raise ValueError(f"image {H}x{W} is smaller than the {size}x{size} patch")
    i = int(rng.integers(0, H - size + 1))
    j = int(rng.integers(0, W - size + 1))
    patch = x[i:i + size, j:j + size]
    if augment_patch:
        patch = augment(patch, int(rng.integers(0, 8)))
    return np.ascontiguousarray(patch)
