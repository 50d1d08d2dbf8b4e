"""Run configuration files.

A configuration is an INI-style text file with four sections::

    [architecture]
    K = 10
    M = 32
    stride = 2
    P = 7
    S = 1
    adaptive = false
    tie = none            # none, all, or a comma list of alpha, a, omega0, psi, thresholds

    [training]
    sigma_lo = 25
    sigma_hi = 25
    ...

    [data]
    train = corpus/train.txt   # relative to the config file
    val =
    test = corpus/test.txt

    [output]
    dir = runs/tiny            # relative to the working directory

Every validation failure raises :class:`ConfigError` naming the file, line
and field.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .net import TIE_FAMILIES, ArchConfig
from .train import TrainSettings

BUNDLED_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


# field name -> (parser, validator description or None)
def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true or false, got {v!r}")


def _tie(v: str) -> frozenset:
    low = v.strip().lower()
    if low in ("", "none"):
        return frozenset()
    if low == "all":
        return frozenset(TIE_FAMILIES)
    names = [t.strip() for t in low.split(",") if t.strip()]
    bad = [t for t in names if t not in TIE_FAMILIES]
    if bad:
        raise ValueError(f"unknown family {bad[0]!r}; choose from {', '.join(TIE_FAMILIES)}")
    return frozenset(names)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


ARCH_FIELDS = {
    "K": (_int, lambda v: _check(v >= 1, "must be >= 1")),
    "M": (_int, lambda v: _check(v >= 1, "must be >= 1")),
    "stride": (_int, lambda v: _check(v in (1, 2, 4), "must be 1, 2 or 4")),
    "P": (_int, lambda v: _check(v >= 1 and v % 2 == 1, "must be a positive odd integer")),
    "S": (_int, lambda v: _check(v >= 1, "must be >= 1")),
    "adaptive": (_bool, None),
    "tie": (_tie, None),
}
_positive = (lambda v: _check(v > 0, "must be > 0"))
_nonneg = (lambda v: _check(v >= 0, "must be >= 0"))
_sigma = (lambda v: _check(0 <= v <= 255, "must lie in [0, 255]"))
TRAIN_FIELDS = {
    "sigma_lo": (_float, _sigma),
    "sigma_hi": (_float, _sigma),
    "batch": (_int, _positive),
    "crop": (_int, _positive),
    "steps": (_int, _positive),
    "seed": (_int, _nonneg),
    "lr_gabor": (_float, _positive),
    "lr_tau": (_float, _nonneg),
    "lr_min": (_float, _nonneg),
    "clip": (_float, _positive),
    "val_every": (_int, _positive),
    "log_every": (_int, _positive),
    "precision": (str, lambda v: _check(v in ("float32", "float64"),
                                        "must be float32 or float64")),
}
DATA_FIELDS = ("train", "val", "test")
SECTIONS = ("architecture", "training", "data", "output")
REQUIRED_ARCH = ("K", "M", "stride", "P", "S")


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig
    training: TrainSettings = field(default_factory=TrainSettings)
    train_manifest: Path | None = None
    val_manifest: Path | None = None
    test_manifest: Path | None = None
    out_dir: Path = Path("runs/default")
    source: str = "<config>"

    def to_text(self, include_output: bool = True) -> str:
        """Canonical text form; parsing it gives back an equal configuration."""
        a, t = self.arch, self.training
        tie = ",".join(f for f in TIE_FAMILIES if f in a.tie) or "none"
        lines = ["[architecture]"]
        lines += [f"K = {a.K}", f"M = {a.M}", f"stride = {a.stride}", f"P = {a.P}",
                  f"S = {a.S}", f"adaptive = {str(a.adaptive).lower()}", f"tie = {tie}", ""]
        lines.append("[training]")
        for f in fields(TrainSettings):
            conv = TRAIN_FIELDS[f.name][0]
            lines.append(f"{f.name} = {conv(str(getattr(t, f.name)))}")
        lines += ["", "[data]"]
        for name in DATA_FIELDS:
            p = getattr(self, f"{name}_manifest")
            lines.append(f"{name} = {'' if p is None else p}")
        lines.append("")
        if include_output:
            lines += ["[output]", f"dir = {self.out_dir}", ""]
        return "\n".join(lines)


def _key_lines(text: str) -> dict:
    """(section, lowercased key) -> 1-based line number, plus section header lines."""
    out, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            out.setdefault((section, None), n)
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            out.setdefault((section, m.group(1).strip().lower()), n)
    return out


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    """Parse and validate configuration text.

    Relative manifest paths are resolved against ``base_dir`` when given.
    """
    lines = _key_lines(text)

    def fail(section, key, msg):
        n = lines.get((section, key.lower() if key else None))
        where = f"{source}:{n}" if n else source
        label = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigError(f"{where}: {label}: {msg}")

    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: [{exc.section}] {exc.option}: "
                          "duplicate field") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: [{exc.section}]: duplicate section") from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: field outside of any section") from None
    except configparser.ParsingError as exc:
        n, line = exc.errors[0]
        raise ConfigError(f"{source}:{n}: cannot parse line {line.strip()!r}") from None

    for sec in cp.sections():
        if sec.lower() not in SECTIONS:
            fail(sec.lower(), None, f"unknown section; expected one of {', '.join(SECTIONS)}")
    sections = {sec.lower(): cp[sec] for sec in cp.sections()}

    def read(section, spec, required=()):
        sect = sections.get(section, {})
        known = {k.lower(): k for k in spec}
        for key in sect:
            if key.lower() not in known:
                fail(section, key, "unknown field")
        values = {}
        for low, name in known.items():
            if low not in sect:
                if name in required:
                    n = lines.get((section, None))
                    where = f"{source}:{n}" if n else source
                    raise ConfigError(f"{where}: [{section}] {name}: missing required field")
                continue
            raw = sect[low]
            conv, valid = spec[name]
            try:
                v = conv(raw.strip())
                if valid is not None:
                    valid(v)
            except ValueError as exc:
                msg = str(exc)
                if msg.startswith("invalid literal") or msg.startswith("could not convert"):
                    msg = f"expected a number, got {raw.strip()!r}"
                fail(section, name, msg)
            values[name] = v
        return values

    if "architecture" not in sections:
        raise ConfigError(f"{source}: [architecture]: missing required section")
    arch = ArchConfig(**read("architecture", ARCH_FIELDS, REQUIRED_ARCH))
    tvals = read("training", TRAIN_FIELDS)
    lo = tvals.get("sigma_lo", TrainSettings.sigma_lo)
    hi = tvals.get("sigma_hi", TrainSettings.sigma_hi)
    if lo > hi:
        fail("training", "sigma_hi" if "sigma_hi" in tvals else "sigma_lo",
             f"noise range is not ordered (sigma_lo={lo:g} > sigma_hi={hi:g})")
    training = TrainSettings(**tvals)

    dvals = read("data", {k: (str, None) for k in DATA_FIELDS})
    manifests = {}
    for name in DATA_FIELDS:
        raw = dvals.get(name, "")
        if raw:
            p = Path(raw)
            if base_dir is not None and not p.is_absolute():
                p = (base_dir / p).resolve()
            manifests[f"{name}_manifest"] = p
    ovals = read("output", {"dir": (str, None)})
    out_dir = Path(ovals["dir"]) if ovals.get("dir") else Path("runs/default")
    return RunConfig(arch, training, out_dir=out_dir, source=source, **manifests)


def resolve_config_path(path) -> Path:
    """A config path on disk, or the name of a bundled config such as ``tiny``."""
    p = Path(path)
    if p.is_file():
        return p
    for cand in (BUNDLED_DIR / str(path), BUNDLED_DIR / f"{path}.ini"):
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"config not found: {path}")


def load_config(path) -> RunConfig:
    p = resolve_config_path(path)
    return parse_config(p.read_text(), source=str(p), base_dir=p.parent)
