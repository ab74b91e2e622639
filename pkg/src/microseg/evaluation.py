"""Confusion matrices, grouped mIoU and plot-ready report files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


def fmt(x: float) -> str:
    return f"{x:.6g}"


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions; ``labels[0]`` is the
    unseen/background slot (class id 0)."""

    labels: tuple[int, ...]
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.labels = tuple(int(c) for c in self.labels)
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels")
        n = len(self.labels)
        if self.counts is None:
            self.counts = np.zeros((n, n), dtype=np.int64)
        self._lookup = np.full(256, -1, dtype=np.int64)
        self._lookup[list(self.labels)] = np.arange(n)

    @classmethod
    def for_classes(cls, seen: Iterable[int]) -> "ConfusionMatrix":
        return cls((0, *sorted(int(c) for c in seen)))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.labels != other.labels:
            raise ValueError("cannot merge matrices over different labels")
        return ConfusionMatrix(self.labels, self.counts + other.counts)

    def index_of(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values).astype(np.int64)
        if values.size and (values.min() < 0 or values.max() > 255):
            raise ValueError("labels must be in 0..255")
        idx = self._lookup[values]
        if (idx < 0).any():
            bad = sorted({int(v) for v in values[idx < 0]})
            raise ValueError(f"labels {bad} are not on the evaluation axis {self.labels}")
        return idx


def accumulate(conf: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    n = len(conf.labels)
    flat = conf.index_of(gt).ravel() * n + conf.index_of(pred).ravel()
    counts = conf.counts + np.bincount(flat, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(conf.labels, counts)


@dataclass
class MiouReport:
    per_class_iou: dict[int, float]  # nan for undefined classes
    undefined: frozenset[int]
    base_miou: float
    novel_miou: float
    all_miou: float


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def miou(conf: ConfusionMatrix, base_classes: Iterable[int], novel_classes: Iterable[int]) -> MiouReport:
    base, novel = {int(c) for c in base_classes}, {int(c) for c in novel_classes}
    if base & novel:
        raise ValueError(f"classes {sorted(base & novel)} are both base and novel")
    foreground = set(conf.labels) - {0}
    if base | novel != foreground:
        raise ValueError(
            f"base+novel {sorted(base | novel)} != evaluated classes {sorted(foreground)}"
        )
    tp = np.diag(conf.counts).astype(np.float64)
    fp = conf.counts.sum(axis=0) - tp
    fn = conf.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    ious: dict[int, float] = {}
    undefined = set()
    for i, c in enumerate(conf.labels):
        if c == 0:
            continue
        if denom[i] == 0:
            ious[c] = math.nan
            undefined.add(c)
        else:
            ious[c] = float(tp[i] / denom[i])
    defined = [c for c in sorted(foreground) if c not in undefined]
    if not defined:
        raise ValueError("no evaluated class occurs in predictions or ground truth")
    return MiouReport(
        per_class_iou=ious,
        undefined=frozenset(undefined),
        base_miou=_mean([ious[c] for c in defined if c in base]),
        novel_miou=_mean([ious[c] for c in defined if c in novel]),
        all_miou=_mean([ious[c] for c in defined]),
    )


# -- report files ---------------------------------------------------------

SUMMARY_HEADER = ["step", "class_id", "iou"]
COMPARISON_HEADER = ["variant", "step", "base_miou", "novel_miou", "all_miou"]
CURVE_HEADER = ["step", "base_miou", "novel_miou", "all_miou"]


def summary_rows(step: int, report: MiouReport) -> list[list[str]]:
    rows = [[str(step), str(c), fmt(v)] for c, v in sorted(report.per_class_iou.items())]
    rows += [
        [str(step), "base_mIoU", fmt(report.base_miou)],
        [str(step), "novel_mIoU", fmt(report.novel_miou)],
        [str(step), "all_mIoU", fmt(report.all_miou)],
    ]
    return rows


def read_summary(path: str | Path) -> dict[int, dict[str, float]]:
    """Per step: ``{"base": .., "novel": .., "all": .., <class id>: iou}``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing summary file {path}")
    out: dict[int, dict] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SUMMARY_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for step, key, value in reader:
            row = out.setdefault(int(step), {})
            if key.endswith("_mIoU"):
                row[key[: -len("_mIoU")]] = float(value)
            else:
                row[int(key)] = float(value)
    return out


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


@dataclass
class RunSummary:
    name: str
    variant: str
    steps: dict[int, dict[str, float]]


def load_run_summary(run_dir: str | Path) -> RunSummary:
    run_dir = Path(run_dir)
    variant_file = run_dir / "variant.txt"
    if not variant_file.exists():
        raise FileNotFoundError(f"run {run_dir.name}: missing variant.txt")
    try:
        steps = read_summary(run_dir / "summary.csv")
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"run {run_dir.name}: {exc}") from None
    return RunSummary(run_dir.name, variant_file.read_text().strip(), steps)


def seed_mean(runs: Sequence[RunSummary]) -> dict[str, dict[int, dict[str, float]]]:
    """Average base/novel/all per (variant, step) over runs, ignoring nan."""
    grouped: dict[str, list[RunSummary]] = {}
    for r in runs:
        grouped.setdefault(r.variant, []).append(r)
    out: dict[str, dict[int, dict[str, float]]] = {}
    for variant, members in grouped.items():
        steps = sorted({s for r in members for s in r.steps})
        out[variant] = {}
        for s in steps:
            out[variant][s] = {}
            for key in ("base", "novel", "all"):
                vals = [r.steps[s][key] for r in members if s in r.steps]
                vals = [v for v in vals if not math.isnan(v)]
                out[variant][s][key] = float(np.mean(vals)) if vals else math.nan
    return out


def emit_report(runs: Sequence[RunSummary | str | Path], out_dir: str | Path) -> dict[str, Path]:
    """Write the variant comparison CSV, one curve CSV per run and a text table."""
    if not runs:
        raise ValueError("need at least one run")
    summaries = [r if isinstance(r, RunSummary) else load_run_summary(r) for r in runs]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    means = seed_mean(summaries)
    comparison = out_dir / "comparison.csv"
    rows = []
    for variant in sorted(means):
        for s, vals in sorted(means[variant].items()):
            rows.append([variant, str(s), fmt(vals["base"]), fmt(vals["novel"]), fmt(vals["all"])])
    _write_csv(comparison, COMPARISON_HEADER, rows)
    written["comparison"] = comparison

    for r in sorted(summaries, key=lambda r: r.name):
        path = out_dir / f"curve_{r.name}.csv"
        _write_csv(
            path,
            CURVE_HEADER,
            [
                [str(s), fmt(v["base"]), fmt(v["novel"]), fmt(v["all"])]
                for s, v in sorted(r.steps.items())
            ],
        )
        written[f"curve_{r.name}"] = path

    table = out_dir / "summary.txt"
    table.write_text(format_table(means))
    written["table"] = table
    return written


def format_table(means: Mapping[str, Mapping[int, Mapping[str, float]]]) -> str:
    """Final-step base / novel / all columns, one row per variant."""
    lines = [f"{'variant':<14}{'base':>10}{'novel':>10}{'all':>10}"]
    for variant in sorted(means):
        last = means[variant][max(means[variant])]
        cells = "".join(f"{100 * last[k]:>10.1f}" for k in ("base", "novel", "all"))
        lines.append(f"{variant:<14}{cells}")
    return "\n".join(lines) + "\n"
