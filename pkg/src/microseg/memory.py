"""Replay buffer for past-step samples with a seen-class coverage guarantee."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from microseg.data import SegSample
from microseg.scenario import StepDataset, relabel


@dataclass(frozen=True)
class MemoryEntry:
    sample: SegSample  # original, un-relabeled mask
    step_acquired: int

    @property
    def sample_id(self) -> int:
        return self.sample.sample_id


@dataclass(frozen=True)
class MemoryBuffer:
    capacity: int
    rng_seed: int = 0
    entries: tuple[MemoryEntry, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def sample_ids(self) -> list[int]:
        return [e.sample_id for e in self.entries]

    def covered_classes(self) -> set[int]:
        out: set[int] = set()
        for e in self.entries:
            out |= e.sample.classes
        return out


def update_memory(
    buffer: MemoryBuffer,
    candidates: Iterable[SegSample],
    seen_classes: Iterable[int],
    step: int,
    capacity: int | None = None,
) -> MemoryBuffer:
    """Resample the buffer from its old entries plus ``candidates``.

    One covering sample is reserved for every seen class not yet covered by
    the reservations (drawn uniformly among the samples containing it); the
    remaining slots are filled uniformly without replacement from the rest.
    """
    capacity = buffer.capacity if capacity is None else capacity
    seen = sorted({int(c) for c in seen_classes})
    if capacity < len(seen):
        raise ValueError(f"capacity {capacity} is smaller than the {len(seen)} seen classes")

    pool: dict[int, MemoryEntry] = {e.sample_id: e for e in buffer.entries}
    for s in candidates:
        pool.setdefault(s.sample_id, MemoryEntry(s, step))
    ids = sorted(pool)
    classes = {i: pool[i].sample.classes for i in ids}

    rng = np.random.default_rng([buffer.rng_seed, step])
    chosen: list[int] = []
    covered: set[int] = set()
    for c in seen:
        if c in covered:
            continue
        holders = [i for i in ids if c in classes[i]]
        if not holders:
            raise ValueError(f"no stored or candidate sample contains seen class {c}")
        pick = holders[int(rng.integers(len(holders)))]
        chosen.append(pick)
        covered |= classes[pick]

    taken = set(chosen)
    rest = [i for i in ids if i not in taken]
    n_fill = min(capacity - len(chosen), len(rest))
    if n_fill > 0:
        chosen += [rest[int(j)] for j in rng.choice(len(rest), size=n_fill, replace=False)]

    entries = tuple(pool[i] for i in sorted(chosen))
    return replace(buffer, capacity=capacity, entries=entries)


def merge_for_training(step_data: StepDataset, buffer: MemoryBuffer, t: int) -> StepDataset:
    """Append buffer samples with their historical classes (``C_{1:t-1}``) labeled."""
    if t < 2:
        raise ValueError("memory replay starts at step 2")
    if not buffer.entries:
        return step_data
    historical = step_data.seen_classes - step_data.current_classes
    present = {s.sample_id for s in step_data.samples}
    extra = [
        SegSample(e.sample.image, relabel(e.sample.mask, historical), e.sample_id)
        for e in buffer.entries
        if e.sample_id not in present
    ]
    return StepDataset(
        step_data.samples + extra,
        step_data.current_classes,
        step_data.seen_classes,
        memory_ids=frozenset(s.sample_id for s in extra),
    )


# -- manifest -------------------------------------------------------------


def write_manifest(buffer: MemoryBuffer, path: str | Path) -> None:
    lines = [f"rng_seed {buffer.rng_seed}", f"capacity {buffer.capacity}"]
    lines += [f"{e.sample_id} {e.step_acquired}" for e in buffer.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path, samples: Sequence[SegSample]) -> MemoryBuffer:
    by_id = {s.sample_id: s for s in samples}
    seed, capacity, entries = 0, 0, []
    for line in Path(path).read_text().splitlines():
        key, value = line.split()
        if key == "rng_seed":
            seed = int(value)
        elif key == "capacity":
            capacity = int(value)
        else:
            entries.append(MemoryEntry(by_id[int(key)], int(value)))
    return MemoryBuffer(capacity, seed, tuple(entries))
