"""Dataset construction: synthetic shape images and the CIFAR-10 binary format.

The synthetic generator draws one filled shape per image (square, disc or
cross, one shape family per class) at a uniformly random position on a
black background, then adds clipped gaussian noise. Classes are told apart
by shape alone, never by position, which makes the images easy for a small
CNN yet non-trivial to attribute.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Dataset
from .rng import stream

SHAPES = ("square", "disc", "cross")

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
IMAGE_SHAPE = (3, 32, 32)
NUM_LABELS = 10


class FormatError(ValueError):
    """Raised when a binary file does not follow the expected layout."""


@dataclass(frozen=True)
class SyntheticShapesSpec:
    size: int = 32
    num_classes: int = 3
    noise: float = 0.05
    train_per_class: int = 100
    holdout_per_class: int = 20
    test_per_class: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.size < 12:
            raise ValueError("image size must be at least 12 pixels")
        if not 2 <= self.num_classes <= 3:
            raise ValueError("class count must be 2 or 3")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        if self.train_per_class < 1 or self.test_per_class < 1 or self.holdout_per_class < 0:
            raise ValueError("split sizes must be positive (holdout may be zero)")


def _draw_square(img, rng):
    size = img.shape[0]
    k = max(4, size // 4)
    r = int(rng.integers(0, size - k + 1))
    c = int(rng.integers(0, size - k + 1))
    img[r : r + k, c : c + k] = 0.9


def _draw_disc(img, rng):
    size = img.shape[0]
    radius = max(3, size // 6)
    cy = int(rng.integers(radius, size - radius))
    cx = int(rng.integers(radius, size - radius))
    yy, xx = np.ogrid[:size, :size]
    img[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = 0.9


def _draw_cross(img, rng):
    size = img.shape[0]
    arm = max(4, size // 3)
    thick = max(2, size // 16)
    cy = int(rng.integers(arm, size - arm))
    cx = int(rng.integers(arm, size - arm))
    half = thick // 2
    img[cy - half : cy - half + thick, cx - arm : cx + arm] = 0.9
    img[cy - arm : cy + arm, cx - half : cx - half + thick] = 0.9


_DRAWERS = {"square": _draw_square, "disc": _draw_disc, "cross": _draw_cross}


def _render(shape: str, size: int, noise: float, rng) -> np.ndarray:
    img = np.zeros((size, size))
    _DRAWERS[shape](img, rng)
    if noise:
        img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def _split(spec: SyntheticShapesSpec, name: str, per_class: int) -> Dataset:
    rng = stream(spec.seed, f"shapes/{name}")
    images = []
    labels = []
    for cls in range(spec.num_classes):
        shape = SHAPES[cls]
        for _ in range(per_class):
            images.append(_render(shape, spec.size, spec.noise, rng))
            labels.append(cls)
    return Dataset(np.stack(images), np.array(labels))


def generate_synthetic(spec: SyntheticShapesSpec):
    """Build (train, holdout, test) datasets from one spec.

    Each split draws from its own named stream of the master seed, so
    resizing one split never changes the others.
    """
    train = _split(spec, "train", spec.train_per_class)
    holdout = _split(spec, "holdout", spec.holdout_per_class) if spec.holdout_per_class else None
    test = _split(spec, "test", spec.test_per_class)
    return train, holdout, test


def parse_cifar10_bytes(raw: bytes):
    """Decode binary records into images in [0, 1] and integer labels.

    Each 3073-byte record is one label byte followed by 3072 pixel bytes
    laid out as three 32x32 row-major planes, red then green then blue.
    """
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise FormatError(
            f"file length {len(raw)} is not a positive multiple of {RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    y = records[:, 0].astype(np.int64)
    bad = y >= NUM_LABELS
    if bad.any():
        raise FormatError(f"invalid label byte {int(y[bad][0])} in record {int(np.flatnonzero(bad)[0])}")
    X = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float64) / 255.0
    return X, y


def encode_cifar10_bytes(X, y) -> bytes:
    """Inverse of parse_cifar10_bytes; parse-then-encode is the identity."""
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 4 or X.shape[1:] != IMAGE_SHAPE:
        raise FormatError(f"expected images of shape {IMAGE_SHAPE}, got {X.shape[1:]}")
    if len(X) != len(y):
        raise FormatError("image and label counts differ")
    if ((y < 0) | (y >= NUM_LABELS)).any():
        raise FormatError("labels must lie in [0, 10)")
    pixels = np.round(X * 255.0).astype(np.uint8).reshape(len(X), -1)
    records = np.concatenate([y.astype(np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


def load_cifar10_binary(directory, classes=None, per_class_cap=None):
    """Load the standard binary layout from a directory.

    Training data comes from data_batch_1.bin through data_batch_5.bin in
    file order, test data from test_batch.bin. `classes` restricts to a
    label subset and remaps labels to 0..len(classes)-1 in the given order
    (downstream models want contiguous classes); `per_class_cap` keeps only
    the first cap occurrences of each class, again in file order.
    """
    directory = Path(directory)
    train_files = [directory / f"data_batch_{i}.bin" for i in range(1, 6)]
    test_file = directory / "test_batch.bin"
    for f in (*train_files, test_file):
        if not f.exists():
            raise FormatError(f"missing batch file {f.name}")

    def load_files(files):
        xs, ys = [], []
        for f in files:
            X, y = parse_cifar10_bytes(f.read_bytes())
            xs.append(X)
            ys.append(y)
        return np.concatenate(xs), np.concatenate(ys)

    def restrict(X, y):
        if classes is not None:
            remap = {int(c): i for i, c in enumerate(classes)}
            keep = np.isin(y, list(remap))
            X, y = X[keep], np.array([remap[int(v)] for v in y[keep]])
        if per_class_cap is not None:
            if per_class_cap < 1:
                raise ValueError("per-class cap must be positive")
            keep = []
            seen: dict = {}
            for i, v in enumerate(y):
                v = int(v)
                if seen.get(v, 0) < per_class_cap:
                    seen[v] = seen.get(v, 0) + 1
                    keep.append(i)
            X, y = X[keep], y[keep]
        return Dataset(X, y)

    return restrict(*load_files(train_files)), restrict(*load_files([test_file]))
