"""Incremental scenarios and per-step dataset views.

A scenario splits the foreground classes ``1..num_classes`` into ordered
learning steps. Step datasets are relabeled so that only the current step's
classes keep their ids; every other pixel becomes ``0`` (the unseen class).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from microseg.data import SegSample

OVERLAPPED = "overlapped"
DISJOINT = "disjoint"
MODES = (OVERLAPPED, DISJOINT)

_NOTATION = re.compile(r"^\s*(\d+)\s*-\s*(\d+)\s*$")


@dataclass(frozen=True)
class ScenarioSpec:
    class_order: tuple[int, ...]
    step_sizes: tuple[int, ...]
    mode: str = OVERLAPPED

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.step_sizes or any(s < 1 for s in self.step_sizes):
            raise ValueError(f"step sizes must be positive, got {list(self.step_sizes)}")
        if sum(self.step_sizes) != len(self.class_order):
            raise ValueError(
                f"step sizes sum to {sum(self.step_sizes)} but there are "
                f"{len(self.class_order)} classes"
            )
        if sorted(self.class_order) != list(range(1, len(self.class_order) + 1)):
            raise ValueError("class_order must be a permutation of 1..num_classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_order)

    @property
    def num_steps(self) -> int:
        return len(self.step_sizes)

    def classes_at(self, t: int) -> tuple[int, ...]:
        """Classes introduced at step ``t`` (1-based), in learning order."""
        self._check_step(t)
        start = sum(self.step_sizes[: t - 1])
        return self.class_order[start : start + self.step_sizes[t - 1]]

    def seen_until(self, t: int) -> tuple[int, ...]:
        """All classes learned in steps ``1..t`` in learning order."""
        if t == 0:
            return ()
        self._check_step(t)
        return self.class_order[: sum(self.step_sizes[:t])]

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} outside 1..{self.num_steps}")


def parse_notation(notation: str) -> tuple[int, int]:
    m = _NOTATION.match(notation)
    if m is None:
        raise ValueError(f"scenario notation must look like 'B-I', got {notation!r}")
    return int(m.group(1)), int(m.group(2))


def build_scenario(
    num_classes: int,
    notation: str | None = None,
    mode: str = OVERLAPPED,
    class_order: Sequence[int] | None = None,
    step_sizes: Sequence[int] | None = None,
    order_seed: int | None = None,
) -> ScenarioSpec:
    """Build a scenario from ``"B-I"`` notation or an explicit ``step_sizes`` list.

    ``order_seed`` shuffles the default ascending class order; it is ignored
    when ``class_order`` is given.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if (notation is None) == (step_sizes is None):
        raise ValueError("give exactly one of notation or step_sizes")
    if notation is not None:
        base, inc = parse_notation(notation)
        if base < 1 or inc < 1:
            raise ValueError(f"B and I must be >= 1 (B={base}, I={inc})")
        if base >= num_classes:
            raise ValueError(
                f"B={base} leaves no incremental classes with I={inc} and "
                f"num_classes={num_classes}"
            )
        rest = num_classes - base
        if rest % inc:
            raise ValueError(
                f"num_classes - B = {num_classes} - {base} = {rest} is not divisible "
                f"by I={inc}"
            )
        sizes = [base] + [inc] * (rest // inc)
    else:
        sizes = [int(s) for s in step_sizes]  # type: ignore[union-attr]

    if class_order is not None:
        order = tuple(int(c) for c in class_order)
    elif order_seed is not None:
        rng = np.random.default_rng(order_seed)
        order = tuple(int(c) for c in rng.permutation(np.arange(1, num_classes + 1)))
    else:
        order = tuple(range(1, num_classes + 1))
    if len(order) != num_classes:
        raise ValueError(f"class_order has {len(order)} entries, expected {num_classes}")
    return ScenarioSpec(class_order=order, step_sizes=tuple(sizes), mode=mode)


@dataclass
class StepDataset:
    samples: list[SegSample]
    current_classes: frozenset[int]
    seen_classes: frozenset[int]
    # sample ids that came from the replay buffer; they keep historical labels
    memory_ids: frozenset[int] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.samples)


def relabel(mask: np.ndarray, keep: frozenset[int] | set[int]) -> np.ndarray:
    """Keep labels in ``keep``; everything else becomes 0."""
    keep_arr = np.fromiter(sorted(keep), dtype=mask.dtype, count=len(keep))
    return np.where(np.isin(mask, keep_arr), mask, 0).astype(mask.dtype)


def filter_step_dataset(
    dataset: Sequence[SegSample], spec: ScenarioSpec, t: int
) -> StepDataset:
    current = frozenset(spec.classes_at(t))
    seen = frozenset(spec.seen_until(t))
    cur_arr = np.array(sorted(current))
    seen_arr = np.array(sorted(seen) + [0])

    out = []
    for s in dataset:
        if not np.isin(s.mask, cur_arr).any():
            continue
        if spec.mode == DISJOINT and not np.isin(s.mask, seen_arr).all():
            continue
        out.append(SegSample(s.image, relabel(s.mask, current), s.sample_id))
    if not out:
        raise ValueError(
            f"step {t} has no samples containing classes {sorted(current)} "
            f"under the {spec.mode} protocol"
        )
    return StepDataset(out, current, seen)


# -- scenario file --------------------------------------------------------

_SCENARIO_KEYS = {"num_classes", "notation", "step_sizes", "mode", "order_seed", "class_order"}


def scenario_from_mapping(values: dict[str, str]) -> ScenarioSpec:
    unknown = set(values) - _SCENARIO_KEYS
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    if "num_classes" not in values:
        raise ValueError("scenario needs num_classes")
    sizes = values.get("step_sizes")
    order = values.get("class_order")
    return build_scenario(
        int(values["num_classes"]),
        notation=values.get("notation"),
        mode=values.get("mode", OVERLAPPED),
        step_sizes=[int(x) for x in re.split(r"[,\s]+", sizes.strip())] if sizes else None,
        class_order=[int(x) for x in re.split(r"[,\s]+", order.strip())] if order else None,
        order_seed=int(values["order_seed"]) if "order_seed" in values else None,
    )


def read_key_values(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_scenario(path: str | Path) -> ScenarioSpec:
    return scenario_from_mapping(read_key_values(Path(path).read_text()))


def save_scenario(spec: ScenarioSpec, path: str | Path) -> None:
    lines = [
        f"num_classes = {spec.num_classes}",
        f"step_sizes = {','.join(str(s) for s in spec.step_sizes)}",
        f"class_order = {','.join(str(c) for c in spec.class_order)}",
        f"mode = {spec.mode}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")
