"""Model files: a text header followed by raw little-endian float64 parameters.

Layout::

    GDLNET-MODEL
    version = 1
    <run configuration text: [architecture], [training], [data]>
    [provenance]
    seed = <int>
    steps = <int>
    manifest_hash = <hex or empty>
    [payload]
    count = <number of float64 values>
    END
    <count little-endian float64 values>

The payload holds, for k = 0 .. K-1, the flat parameter vector of analysis
bank A at layer k followed by that of bank B at layer k (6*S*M values each,
subband-major, atom-minor, per atom alpha, a1, a2, w1, w2, psi); then the
flat vector of D; then tau0 as a (K, M) row-major block and, for adaptive
models, tau1 likewise.  Tied families are written at every layer and must be
identical across layers on load.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_config
from .gabor import FAMILIES, FilterbankSpec
from .net import ModelParams

MAGIC = "GDLNET-MODEL"
VERSION = 1
END = b"\nEND\n"


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class Provenance:
    seed: int = 0
    steps: int = 0
    manifest_hash: str = ""


@dataclass
class ModelFile:
    theta: ModelParams
    run: RunConfig
    provenance: Provenance


def _payload(theta: ModelParams) -> np.ndarray:
    c = theta.config
    A, B = theta.bank_params("A"), theta.bank_params("B")
    parts = []
    for k in range(c.K):
        parts.append(FilterbankSpec(A[k], c.P).to_flat())
        parts.append(FilterbankSpec(B[k], c.P).to_flat())
    parts.append(theta.phi_D.to_flat())
    parts.append(theta.tau(0).ravel())
    if c.adaptive:
        parts.append(theta.tau(1).ravel())
    return np.concatenate(parts)


def _from_payload(run: RunConfig, vals: np.ndarray) -> ModelParams:
    c = run.arch
    n = 6 * c.S * c.M
    expected = (2 * c.K + 1) * n + c.K * c.M * (2 if c.adaptive else 1)
    if vals.size != expected:
        raise ModelFileError(f"payload holds {vals.size} values, architecture needs {expected}")
    A = np.empty((c.K, c.M, c.S, 6))
    B = np.empty_like(A)
    pos = 0
    for k in range(c.K):
        A[k] = FilterbankSpec.from_flat(vals[pos:pos + n], c.M, c.S, c.P).params
        B[k] = FilterbankSpec.from_flat(vals[pos + n:pos + 2 * n], c.M, c.S, c.P).params
        pos += 2 * n
    D = FilterbankSpec.from_flat(vals[pos:pos + n], c.M, c.S, c.P).params
    pos += n
    KM = c.K * c.M
    tau0 = vals[pos:pos + KM].reshape(c.K, c.M)
    tau1 = vals[pos + KM:pos + 2 * KM].reshape(c.K, c.M) if c.adaptive else None
    for fam, sl in FAMILIES.items():
        if fam in c.tie:
            for bank, arr in (("A", A), ("B", B)):
                if not np.array_equal(arr[..., sl], np.broadcast_to(arr[:1, ..., sl], arr[..., sl].shape)):
                    raise ModelFileError(f"tied family {bank}.{fam} differs across layers")
    if "thresholds" in c.tie:
        for t in (tau0, tau1):
            if t is not None and not np.array_equal(t, np.broadcast_to(t[:1], t.shape)):
                raise ModelFileError("tied thresholds differ across layers")
    return ModelParams.from_layers(c, A, B, D, tau0, tau1)


def save_model(path, theta: ModelParams, run: RunConfig | None = None,
               provenance: Provenance | None = None) -> None:
    if run is None:
        run = RunConfig(theta.config)
    elif run.arch != theta.config:
        raise ValueError("run configuration does not match the model architecture")
    provenance = provenance or Provenance()
    vals = _payload(theta)
    header = [MAGIC, f"version = {VERSION}", run.to_text(include_output=False).rstrip("\n"), "",
              "[provenance]", f"seed = {provenance.seed}", f"steps = {provenance.steps}",
              f"manifest_hash = {provenance.manifest_hash}", "",
              "[payload]", f"count = {vals.size}"]
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode("utf-8"))
        fh.write(END)
        fh.write(vals.astype("<f8").tobytes())


def _split_header(text: str):
    main, extra, current = [], {}, None
    for line in text.splitlines():
        s = line.strip()
        if s in ("[provenance]", "[payload]"):
            current = s[1:-1]
            extra[current] = {}
            continue
        if current is None:
            main.append(line)
        elif s:
            key, _, val = s.partition("=")
            extra[current][key.strip()] = val.strip()
    return "\n".join(main), extra


def load_model(path) -> ModelFile:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    buf = path.read_bytes()
    first = buf.split(b"\n", 1)[0].decode("utf-8", "replace")
    if first != MAGIC:
        raise ModelFileError(f"{path}: not a model file (bad magic)")
    cut = buf.find(END)
    if cut < 0:
        raise ModelFileError(f"{path}: header is not terminated")
    lines = buf[:cut].decode("utf-8").split("\n")
    version = lines[1].partition("=")[2].strip()
    if version != str(VERSION):
        raise ModelFileError(f"{path}: unsupported model file version {version!r}")
    cfg_text, extra = _split_header("\n".join(lines[2:]))
    try:
        run = parse_config(cfg_text, source=f"{path} header")
    except ConfigError as exc:
        raise ModelFileError(str(exc)) from None
    try:
        prov = extra["provenance"]
        provenance = Provenance(int(prov["seed"]), int(prov["steps"]), prov["manifest_hash"])
        count = int(extra["payload"]["count"])
    except (KeyError, ValueError) as exc:
        raise ModelFileError(f"{path}: malformed header ({exc})") from None
    raw = buf[cut + len(END):]
    if len(raw) != 8 * count:
        raise ModelFileError(f"{path}: payload has {len(raw)} bytes, expected {8 * count}")
    vals = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ModelFile(_from_payload(run, vals), run, provenance)
