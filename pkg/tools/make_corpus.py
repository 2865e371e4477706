"""Regenerate the bundled 128x128 luma corpus from scikit-image sample data.

Crops are area-downsampled by 2 so each image carries dense natural
texture.  Run from the repository root; needs scikit-image.
"""

import sys
from pathlib import Path

import numpy as np
import skimage.data as data
from skimage.color import rgb2gray

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from rrnet.formats import write_pgm  # noqa: E402

OUT = Path(__file__).resolve().parents[1] / "src" / "rrnet" / "data" / "corpus"

# (name, source, top, left); every crop is 256x256 before downsampling
TRAIN = [
    ("camera_a", "camera", 40, 150),
    ("camera_b", "camera", 250, 0),
    ("astronaut_a", "astronaut", 0, 120),
    ("astronaut_b", "astronaut", 250, 200),
    ("brick", "brick", 100, 100),
    ("grass", "grass", 0, 0),
    ("gravel", "gravel", 128, 128),
    ("moon", "moon", 200, 100),
    ("coins", "coins", 20, 60),
    ("clock", "clock", 20, 60),
    ("chelsea", "chelsea", 30, 120),
    ("coffee", "coffee", 100, 200),
    ("rocket", "rocket", 100, 250),
    ("camera_d", "camera", 0, 0),
    ("hubble", "hubble_deep_field", 300, 300),
    ("immuno", "immunohistochemistry", 120, 120),
]
TEST = [
    ("camera_c", "camera", 256, 256),
    ("cat", "cat", 30, 100),
    ("coffee_b", "coffee", 144, 0),
    ("astronaut_c", "astronaut", 100, 0),
]


def load(name):
    img = getattr(data, name)()
    if img.ndim == 3:
        img = rgb2gray(img[..., :3]) * 255.0
    return img.astype(np.float64)


def crop(name, top, left):
    img = load(name)
    patch = img[top : top + 256, left : left + 256]
    assert patch.shape == (256, 256), (name, patch.shape)
    small = patch.reshape(128, 2, 128, 2).mean(axis=(1, 3))
    return np.clip(np.floor(small + 0.5), 0, 255).astype(np.uint8)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for split, items in (("train", TRAIN), ("test", TEST)):
        for i, (label, src, top, left) in enumerate(items):
            write_pgm(OUT / f"{split}_{i:02d}_{label}.pgm", crop(src, top, left))


if __name__ == "__main__":
    main()
