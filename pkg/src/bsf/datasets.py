"""Dataset ingestion: IDX image/label files, CIFAR-10 binary batches, and a
self-contained rendered-digit generator for desk-scale runs.

IDX headers are big-endian (magic 2051 for images, 2049 for labels); CIFAR-10
batches are flat records of 1 label byte + 3072 channel-major pixel bytes.
Pixels are scaled to [-1, 1] with 0 -> -1.0 and 255 -> +1.0 exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .serial import FormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

CIFAR10_CLASSES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)

_CIFAR_RECORD = 1 + 3 * 32 * 32


def _scale_pixels(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 127.5 - 1.0


def load_idx_images(path: Union[str, Path]) -> np.ndarray:
    """Parse an IDX3 image file into a (N, H, W) uint8 array."""
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise FormatError(
                f"{path}: truncated IDX image header, expected 16 bytes, got {len(header)}"
            )
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{path}: bad IDX image magic {magic} at offset 0, expected {IDX_IMAGES_MAGIC}"
            )
        body = f.read()
    expected = count * rows * cols
    if len(body) != expected:
        raise FormatError(
            f"{path}: expected {expected} pixel bytes after the header, got {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path: Union[str, Path]) -> np.ndarray:
    """Parse an IDX1 label file into a (N,) uint8 array."""
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise FormatError(
                f"{path}: truncated IDX label header, expected 8 bytes, got {len(header)}"
            )
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{path}: bad IDX label magic {magic} at offset 0, expected {IDX_LABELS_MAGIC}"
            )
        body = f.read()
    if len(body) != count:
        raise FormatError(
            f"{path}: expected {count} label bytes after the header, got {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8)


def load_mnist(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Load an IDX image/label pair, scaled to [-1, 1], images as (N, 1, H, W)."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(
            f"image/label count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    return _scale_pixels(images)[:, None, :, :], labels.astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_cifar10(batch_paths: Iterable[Union[str, Path]]) -> tuple[np.ndarray, np.ndarray]:
    """Load CIFAR-10 binary batches into (N, 3, 32, 32) in [-1, 1] plus labels."""
    images = []
    labels = []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % _CIFAR_RECORD:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of the {_CIFAR_RECORD}-byte record"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        labels.append(records[:, 0])
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels)
    if labels.max(initial=0) >= len(CIFAR10_CLASSES):
        raise FormatError(f"label byte {labels.max()} outside the 10 CIFAR-10 classes")
    return _scale_pixels(np.concatenate(images)), labels.astype(np.int64)


# --- rendered digits ---------------------------------------------------------

_FONT_FILES = (
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSansMono.ttf",
)


def _load_fonts(size_px: int):
    import matplotlib
    from PIL import ImageFont

    ttf_dir = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    return [ImageFont.truetype(str(ttf_dir / name), size_px) for name in _FONT_FILES]


def render_digit_dataset(
    n: int, *, seed: int, size: int = 28
) -> tuple[np.ndarray, np.ndarray]:
    """Render n grayscale digit images with jittered fonts, pose, and noise.

    Returns ((n, size, size) uint8 images, (n,) uint8 labels).  Deterministic
    given the seed.  Classes are drawn uniformly, so large samples are
    balanced to within sampling noise.
    """
    from PIL import Image, ImageDraw

    rng = np.random.default_rng([seed, 0xD161])
    big = size * 2
    fonts_by_px: dict[int, list] = {}
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)

    for i in range(n):
        digit = str(labels[i])
        px = int(rng.integers(17, 23))
        if px not in fonts_by_px:
            fonts_by_px[px] = _load_fonts(px)
        font = fonts_by_px[px][rng.integers(0, len(_FONT_FILES))]

        canvas = Image.new("L", (big, big), 0)
        draw = ImageDraw.Draw(canvas)
        x0, y0, x1, y1 = font.getbbox(digit)
        gw, gh = x1 - x0, y1 - y0
        draw.text(((big - gw) / 2 - x0, (big - gh) / 2 - y0), digit, fill=255, font=font)

        angle = float(rng.uniform(-12.0, 12.0))
        canvas = canvas.rotate(angle, resample=Image.BILINEAR, center=(big / 2, big / 2))

        dx = float(rng.uniform(-2.5, 2.5))
        dy = float(rng.uniform(-2.5, 2.5))
        left = big / 2 - size / 2 + dx
        top = big / 2 - size / 2 + dy
        crop = canvas.crop((int(round(left)), int(round(top)),
                            int(round(left)) + size, int(round(top)) + size))

        arr = np.asarray(crop, dtype=np.float64)
        arr *= float(rng.uniform(0.75, 1.0))
        arr += rng.normal(0.0, 10.0, size=arr.shape)
        images[i] = np.clip(arr, 0, 255).astype(np.uint8)
    return images, labels


def write_digit_corpus(
    out_dir: Union[str, Path], n_train: int, n_test: int, *, seed: int
) -> dict[str, Path]:
    """Render a train/test digit corpus and write it as standard IDX files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_images, train_labels = render_digit_dataset(n_train, seed=seed)
    test_images, test_labels = render_digit_dataset(n_test, seed=seed + 1)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "t10k-images-idx3-ubyte",
        "test_labels": out / "t10k-labels-idx1-ubyte",
    }
    write_idx_images(paths["train_images"], train_images)
    write_idx_labels(paths["train_labels"], train_labels)
    write_idx_images(paths["test_images"], test_images)
    write_idx_labels(paths["test_labels"], test_labels)
    return paths


def load_mnist_dir(data_dir: Union[str, Path], split: str = "train"):
    """Load the standard IDX file pair for one split from a directory."""
    data_dir = Path(data_dir)
    prefix = "train" if split == "train" else "t10k"
    return load_mnist(
        data_dir / f"{prefix}-images-idx3-ubyte", data_dir / f"{prefix}-labels-idx1-ubyte"
    )
