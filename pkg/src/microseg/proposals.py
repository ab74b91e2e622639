"""Class-agnostic segment proposals.

A proposal set is a stack of N binary masks that partitions the image: every
pixel is covered by exactly one mask. The generators here are rule based and
never trained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

PROP_MAGIC = b"PROP"
_HEADER = struct.Struct("<4sIII")
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class PartitionError(ValueError):
    def __init__(self, pixel: tuple[int, int], count: int) -> None:
        super().__init__(f"pixel {pixel} is covered by {count} proposals (expected 1)")
        self.pixel = pixel
        self.count = count


@dataclass(frozen=True)
class PartitionVerdict:
    ok: bool
    pixel: tuple[int, int] | None = None
    count: int | None = None

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class ProposalSet:
    masks: np.ndarray  # bool, N x H x W

    def __post_init__(self) -> None:
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3 or self.masks.shape[0] < 1:
            raise ValueError(f"proposal masks must be N x H x W with N >= 1, got {self.masks.shape}")

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    @property
    def empty(self) -> np.ndarray:
        return ~self.masks.any(axis=(1, 2))

    def index_map(self) -> np.ndarray:
        """H x W array holding the proposal index of each pixel."""
        return np.argmax(self.masks, axis=0)

    def padded(self, n: int) -> "ProposalSet":
        """Append empty masks up to ``n`` proposals."""
        if n < self.n:
            raise ValueError(f"cannot pad {self.n} proposals down to {n}")
        pad = np.zeros((n - self.n, *self.shape), dtype=bool)
        return ProposalSet(np.concatenate([self.masks, pad]))

    @classmethod
    def from_index_map(cls, index: np.ndarray, n: int | None = None) -> "ProposalSet":
        n = int(index.max()) + 1 if n is None else n
        return cls(index[None, :, :] == np.arange(n)[:, None, None])


def validate_partition(proposals: ProposalSet) -> PartitionVerdict:
    coverage = proposals.masks.sum(axis=0)
    bad = np.argwhere(coverage != 1)
    if bad.size == 0:
        return PartitionVerdict(True)
    i, j = (int(v) for v in bad[0])
    return PartitionVerdict(False, (i, j), int(coverage[i, j]))


def check_partition(proposals: ProposalSet) -> None:
    verdict = validate_partition(proposals)
    if not verdict:
        raise PartitionError(verdict.pixel, verdict.count)  # type: ignore[arg-type]


def generate_grid_proposals(height: int, width: int, tiles_y: int, tiles_x: int) -> ProposalSet:
    if tiles_y < 1 or tiles_x < 1:
        raise ValueError("need at least one tile along each axis")
    if tiles_y > height or tiles_x > width:
        raise ValueError(f"{tiles_y}x{tiles_x} tiles do not fit a {height}x{width} image")
    # the last tile on each axis absorbs the remainder
    row_tile = np.minimum(np.arange(height) // (height // tiles_y), tiles_y - 1)
    col_tile = np.minimum(np.arange(width) // (width // tiles_x), tiles_x - 1)
    index = row_tile[:, None] * tiles_x + col_tile[None, :]
    return ProposalSet.from_index_map(index, tiles_y * tiles_x)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 4-connected regions of constant value.

    Returns an index map whose labels follow raster order of each region's
    first pixel, and the region count.
    """
    index = np.full(mask.shape, -1, dtype=np.int64)
    offset = 0
    for value in np.unique(mask):
        labels, count = ndimage.label(mask == value, structure=_FOUR_CONNECTED)
        hit = labels > 0
        index[hit] = labels[hit] - 1 + offset
        offset += count
    # renumber by first pixel in raster order
    flat = index.ravel()
    first = np.full(offset, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size))
    rank = np.empty(offset, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(offset)
    return rank[index], offset


def generate_oracle_proposals(mask: np.ndarray, max_n: int, pad_to: int | None = None) -> ProposalSet:
    """One proposal per connected region of the label mask, labels discarded.

    ``pad_to`` appends empty masks so every sample carries the same N.
    """
    index, count = connected_components(np.asarray(mask))
    if count > max_n:
        raise ValueError(f"mask has {count} connected regions, more than max_n={max_n}")
    props = ProposalSet.from_index_map(index, count)
    return props.padded(pad_to) if pad_to is not None else props


# -- proposal cache file --------------------------------------------------


def write_proposals(path: str | Path, proposals: ProposalSet) -> None:
    n, h, w = proposals.masks.shape
    bits = np.packbits(proposals.masks.reshape(-1).astype(np.uint8), bitorder="big")
    Path(path).write_bytes(_HEADER.pack(PROP_MAGIC, n, h, w) + bits.tobytes())


def read_proposals(path: str | Path) -> ProposalSet:
    data = Path(path).read_bytes()
    magic, n, h, w = _HEADER.unpack_from(data)
    if magic != PROP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    bits = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    total = n * h * w
    if bits.size != (total + 7) // 8:
        raise ValueError(f"{path}: expected {(total + 7) // 8} payload bytes, got {bits.size}")
    flat = np.unpackbits(bits, count=total, bitorder="big")
    return ProposalSet(flat.reshape(n, h, w).astype(bool))
