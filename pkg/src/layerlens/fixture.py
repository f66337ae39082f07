"""Deterministic desk-scale fixture: a 3-class CNN and synthetic images.

``tinynet_3class`` is a 2-conv + 1-dense network over 3x16x16 inputs whose
weights come from a fixed RNG seed, so every build of the fixture is
byte-identical. The three synthetic images are quantized to 8-bit steps so
a PNG round trip reproduces them exactly.

Run ``python -m layerlens.fixture OUTDIR`` to materialize the model, the
images, and a checksum file.
"""

from __future__ import annotations

import hashlib
import sys
from pathlib import Path

import numpy as np

from layerlens.masks import save_png
from layerlens.model import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    ModelSpec,
    ReLU,
    Softmax,
    save_model,
)

FIXTURE_SEED = 7
MODEL_NAME = "tinynet-3class"
CLASS_NAMES = ["crate", "beacon", "fence"]
IMAGE_NAMES = ["img0", "img1", "img2"]
CONV_LAYERS = ["conv1", "conv2"]


def tinynet_3class() -> ModelSpec:
    rng = np.random.default_rng(FIXTURE_SEED)

    def conv_init(out_c, in_c, k):
        scale = 1.0 / np.sqrt(in_c * k * k)
        return rng.normal(scale=scale, size=(out_c, in_c, k, k))

    layers = [
        Conv2D("conv1", conv_init(8, 3, 3), rng.normal(scale=0.05, size=8), stride=1, padding=1),
        ReLU("relu1"),
        MaxPool2D("pool1", window=2, stride=2),
        Conv2D("conv2", conv_init(12, 8, 3), rng.normal(scale=0.05, size=12), stride=1, padding=1),
        ReLU("relu2"),
        MaxPool2D("pool2", window=2, stride=2),
        Flatten("flatten"),
        Dense(
            "logits",
            rng.normal(scale=1.0 / np.sqrt(192), size=(3, 192)),
            rng.normal(scale=0.05, size=3),
        ),
        Softmax("softmax"),
    ]
    return ModelSpec(input_shape=(3, 16, 16), layers=layers, class_names=list(CLASS_NAMES))


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def fixture_images() -> list[np.ndarray]:
    """Three synthetic (H, W, 3) images: gradient+square, disc, stripes."""
    h = w = 16
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    img0 = np.zeros((h, w, 3))
    img0[:, :, 0] = xx / (w - 1)
    img0[:, :, 1] = yy / (h - 1)
    img0[2:7, 2:7, :] = 0.95

    img1 = np.zeros((h, w, 3))
    disc = (yy - 7.5) ** 2 + (xx - 7.5) ** 2 <= 4.5**2
    img1[:, :, 2] = 0.2
    img1[disc, 0] = 0.9
    img1[disc, 1] = 0.7
    img1[disc, 2] = 0.1

    img2 = np.zeros((h, w, 3))
    stripes = (xx.astype(int) // 2) % 2 == 0
    img2[stripes, :] = 0.85
    img2[~stripes, 1] = 0.35

    return [_quantize(im) for im in (img0, img1, img2)]


def fixture_checksum(directory: str | Path) -> str:
    """SHA-256 over every fixture file, stable across rebuilds."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for path in sorted(directory.rglob("*")):
        if path.is_file() and path.name != "fixture.sha256":
            digest.update(path.relative_to(directory).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def write_fixture(directory: str | Path) -> Path:
    """Materialize the model, images, and checksum under ``directory``."""
    directory = Path(directory)
    model_dir = directory / MODEL_NAME
    save_model(tinynet_3class(), model_dir)
    for name, image in zip(IMAGE_NAMES, fixture_images()):
        save_png(directory / f"{name}.png", image)
    checksum = fixture_checksum(directory)
    (directory / "fixture.sha256").write_text(checksum + "\n")
    return directory


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    out = Path(args[0]) if args else Path("fixture")
    write_fixture(out)
    print(f"fixture written to {out} (sha256 {fixture_checksum(out)[:16]}...)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
