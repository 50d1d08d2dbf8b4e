"""Build the bundled desk-scale corpus from scikit-image sample images.

Every source image is CC0 or public domain (see corpus/README.md).  Images
are converted to grayscale, resized so the short side is 200 pixels and
center-cropped to 160 x 160, then written as 8-bit binary PGM.

    python scripts/make_corpus.py [outdir]
"""
import sys
from pathlib import Path

import numpy as np
import skimage.data
from skimage.color import rgb2gray
from skimage.transform import resize

from gdlnet.data import to_uint8, write_pgm

TRAIN = ["camera", "astronaut", "coins", "coffee", "rocket", "brick",
         "gravel", "grass", "cell", "immunohistochemistry"]
TEST = ["chelsea", "clock"]
SIZE = 160
SHORT = 200


def prepare(name: str) -> np.ndarray:
    img = getattr(skimage.data, name)()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = rgb2gray(img[..., :3] / 255.0)
    else:
        img = img / 255.0
    h, w = img.shape
    scale = SHORT / min(h, w)
    img = resize(img, (round(h * scale), round(w * scale)), anti_aliasing=True)
    h, w = img.shape
    i, j = (h - SIZE) // 2, (w - SIZE) // 2
    return img[i:i + SIZE, j:j + SIZE]


def main(outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    for split, names in (("train", TRAIN), ("test", TEST)):
        lines = []
        for name in names:
            fname = f"{name}.pgm"
            write_pgm(outdir / fname, to_uint8(prepare(name)))
            lines.append(fname)
        (outdir / f"{split}.txt").write_text(
            f"# desk corpus, {split} split\n" + "\n".join(lines) + "\n")


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "src" / "gdlnet" / "corpus"
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else default)
