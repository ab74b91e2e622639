"""Synthetic shape dataset and its binary on-disk format.

Every foreground class is a (shape, colour) pair composited on a noisy grey
background that is labeled 0. Files are stored as ``NNNN.img`` (float32
pixels) and ``NNNN.msk`` (uint8 class ids), each behind a 16-byte header.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"CISS"
_HEADER = struct.Struct("<4sIII")

SHAPES = ("square", "disk", "triangle", "diamond", "cross", "ring")

MIN_TRAIN_IMAGES_PER_CLASS = 5
MIN_VAL_IMAGES_PER_CLASS = 2
MAX_INSTANCES = 4


@dataclass
class SegSample:
    image: np.ndarray  # float32, channels x H x W
    mask: np.ndarray  # uint8, H x W
    sample_id: int

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.mask.ndim != 2:
            raise ValueError("image must be CxHxW and mask HxW")
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(
                f"image spatial shape {self.image.shape[1:]} != mask shape {self.mask.shape}"
            )

    @property
    def classes(self) -> set[int]:
        return {int(c) for c in np.unique(self.mask) if c != 0}


def class_color(k: int, num_classes: int) -> np.ndarray:
    hue = (k - 1) / num_classes
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9), dtype=np.float32)


def class_shape(k: int) -> str:
    return SHAPES[(k - 1) % len(SHAPES)]


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` stencil for one instance."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r = size / 2.0
    dy, dx = yy - c, xx - c
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    if shape == "triangle":
        # apex at top, base at bottom
        return np.abs(dx) <= (yy + 1) / 2.0
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "cross":
        arm = max(1.0, size / 6.0)
        return (np.abs(dy) <= arm) | (np.abs(dx) <= arm)
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.45 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _render(
    rng: np.random.Generator,
    classes: Sequence[int],
    num_classes: int,
    height: int,
    width: int,
    noise: float,
) -> tuple[np.ndarray, np.ndarray]:
    image = 0.5 + noise * rng.standard_normal((3, height, width))
    mask = np.zeros((height, width), dtype=np.uint8)
    lo = max(4, min(height, width) // 4)
    hi = max(lo + 1, min(height, width) // 2)
    for k in classes:
        size = int(rng.integers(lo, hi))
        y0 = int(rng.integers(0, height - size + 1))
        x0 = int(rng.integers(0, width - size + 1))
        stencil = shape_mask(class_shape(k), size)
        region = (slice(y0, y0 + size), slice(x0, x0 + size))
        color = class_color(k, num_classes)[:, None]
        pixels = color + noise * rng.standard_normal((3, int(stencil.sum())))
        image[:, region[0], region[1]][:, stencil] = pixels
        mask[region][stencil] = k
    return image.astype(np.float32), mask


def _split(
    rng: np.random.Generator,
    count: int,
    num_classes: int,
    per_class: int,
    height: int,
    width: int,
    noise: float,
    id_offset: int,
) -> list[SegSample]:
    if count < per_class * num_classes:
        raise ValueError(
            f"{count} images cannot give each of {num_classes} classes "
            f"{per_class} guaranteed images (need >= {per_class * num_classes})"
        )
    # Each of the first per_class*num_classes images gets one guaranteed class,
    # drawn last so it stays visible.
    guaranteed = np.repeat(np.arange(1, num_classes + 1), per_class)
    extra = rng.integers(1, num_classes + 1, size=count - guaranteed.size)
    anchors = rng.permutation(np.concatenate([guaranteed, extra]))
    samples = []
    for i, anchor in enumerate(anchors):
        n_inst = int(rng.integers(1, MAX_INSTANCES + 1))
        others = [int(c) for c in rng.integers(1, num_classes + 1, size=n_inst - 1)]
        image, mask = _render(rng, others + [int(anchor)], num_classes, height, width, noise)
        samples.append(SegSample(image, mask, id_offset + i))
    return samples


def generate_synthetic_dataset(
    seed: int,
    num_classes: int,
    num_train: int,
    num_val: int,
    height: int = 32,
    width: int = 32,
    noise: float = 0.2,
) -> tuple[list[SegSample], list[SegSample]]:
    """Return ``(train, val)`` synthetic samples, deterministic in ``seed``.

    Sample ids are ``0..num_train-1`` for train and continue for val, so ids
    are unique across both splits.
    """
    if height < 16 or width < 16:
        raise ValueError("height and width must be >= 16")
    if not 2 <= num_classes <= 254:
        raise ValueError("num_classes must be in 2..254")
    rng = np.random.default_rng(seed)
    train = _split(
        rng, num_train, num_classes, MIN_TRAIN_IMAGES_PER_CLASS, height, width, noise, 0
    )
    val = _split(
        rng, num_val, num_classes, MIN_VAL_IMAGES_PER_CLASS, height, width, noise, num_train
    )
    return train, val


# -- on-disk format -------------------------------------------------------


def _write(path: Path, channels: int, h: int, w: int, payload: bytes) -> None:
    path.write_bytes(_HEADER.pack(MAGIC, channels, h, w) + payload)


def _read_header(data: bytes, path: Path) -> tuple[int, int, int]:
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, c, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    return c, h, w


def write_image(path: str | Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    _write(Path(path), c, h, w, np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    c, h, w = _read_header(data, path)
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if arr.size != c * h * w:
        raise ValueError(f"{path}: payload has {arr.size} floats, expected {c * h * w}")
    return arr.reshape(c, h, w).astype(np.float32)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    h, w = mask.shape
    _write(Path(path), 1, h, w, np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    c, h, w = _read_header(data, path)
    if c != 1:
        raise ValueError(f"{path}: mask header has {c} channels")
    arr = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if arr.size != h * w:
        raise ValueError(f"{path}: payload has {arr.size} bytes, expected {h * w}")
    return arr.reshape(h, w).copy()


def save_split(samples: Sequence[SegSample], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(directory / f"{s.sample_id:04d}.img", s.image)
        write_mask(directory / f"{s.sample_id:04d}.msk", s.mask)


def load_split(directory: str | Path) -> list[SegSample]:
    directory = Path(directory)
    samples = []
    for img_path in sorted(directory.glob("*.img")):
        msk_path = img_path.with_suffix(".msk")
        if not msk_path.exists():
            raise FileNotFoundError(f"missing mask for {img_path}")
        samples.append(SegSample(read_image(img_path), read_mask(msk_path), int(img_path.stem)))
    return samples


def save_dataset(train: Sequence[SegSample], val: Sequence[SegSample], root: str | Path) -> None:
    save_split(train, Path(root) / "train")
    save_split(val, Path(root) / "val")


def load_dataset(root: str | Path) -> tuple[list[SegSample], list[SegSample]]:
    root = Path(root)
    return load_split(root / "train"), load_split(root / "val")
