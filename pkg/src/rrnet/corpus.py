"""The bundled desk-scale corpus: 16 training and 4 held-out 128x128 luma images."""

from __future__ import annotations

from pathlib import Path

from .codec import Frame
from .formats import read_pgm

CORPUS_DIR = Path(__file__).resolve().parent / "data" / "corpus"


def _load(prefix: str) -> dict[str, Frame]:
    paths = sorted(CORPUS_DIR.glob(f"{prefix}_*.pgm"))
    return {p.stem: read_pgm(p) for p in paths}


def train_images() -> dict[str, Frame]:
    return _load("train")


def test_images() -> dict[str, Frame]:
    return _load("test")


def all_images() -> dict[str, Frame]:
    return {**train_images(), **test_images()}
