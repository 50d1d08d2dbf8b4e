"""Write manifests and a config for training on the full BSD432 / BSD68 sets.

The images are not bundled. Download the Berkeley segmentation images
separately, then point this script at a directory of 432 training images and
one of 68 test images:

    python scripts/make_bsd_manifests.py BSD432/ BSD68/ runs/bsd

Color images are converted to 8-bit grayscale PGM (Pillow "L" mode) under
``OUT/images``; grayscale PGM/PNG files are listed as they are. The script
writes ``OUT/train.txt``, ``OUT/test.txt`` and ``OUT/bsd_mog1.ini``, a copy of
the bundled full-size single-noise-level config that reads them:

    gdlnet train --config runs/bsd/bsd_mog1.ini --out runs/bsd/model
"""
import argparse
from dataclasses import replace
from pathlib import Path

from gdlnet.config import load_config

SUFFIXES = {".png", ".jpg", ".jpeg", ".pgm", ".bmp", ".tif", ".tiff"}


def collect(src: Path, dst: Path) -> list[Path]:
    from PIL import Image

    out = []
    for p in sorted(src.iterdir()):
        if p.suffix.lower() not in SUFFIXES:
            continue
        with Image.open(p) as im:
            if im.mode == "L" and p.suffix.lower() in (".pgm", ".png"):
                out.append(p.resolve())
                continue
            target = dst / f"{p.stem}.pgm"
            im.convert("L").save(target)
            out.append(target.resolve())
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("train_dir", type=Path)
    ap.add_argument("test_dir", type=Path)
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    images = args.out / "images"
    images.mkdir(parents=True, exist_ok=True)
    for name, src in (("train", args.train_dir), ("test", args.test_dir)):
        paths = collect(src, images)
        (args.out / f"{name}.txt").write_text("".join(f"{p}\n" for p in paths))
        print(f"{name}: {len(paths)} images")
    run = load_config("gdlnet_s_mog1")
    run = replace(run, train_manifest=Path("train.txt"), test_manifest=Path("test.txt"),
                  out_dir=args.out / "model")
    (args.out / "bsd_mog1.ini").write_text(run.to_text())
    print(f"config written to {args.out / 'bsd_mog1.ini'}")


if __name__ == "__main__":
    main()
