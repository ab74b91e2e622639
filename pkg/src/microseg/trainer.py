"""Incremental training loop, joint upper-bound training and run artifacts."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from microseg import checkpoint
from microseg.data import SegSample, generate_synthetic_dataset, load_dataset
from microseg.evaluation import (
    ConfusionMatrix,
    MiouReport,
    accumulate,
    fmt,
    miou,
    summary_rows,
)
from microseg.losses import LossBreakdown, bce_loss, contrastive_loss, total_loss
from microseg.memory import MemoryBuffer, merge_for_training, update_memory, write_manifest
from microseg.model import (
    FeatureExtractorConfig,
    MicroSegModel,
    dense_predict,
    expand_head,
    extract_features,
    freeze_extractor,
    inference,
    proposal_predict,
)
from microseg.proposals import ProposalSet, generate_grid_proposals, generate_oracle_proposals
from microseg.remodel import FUTURE, pseudo_labels, remodel_labels
from microseg.scenario import (
    ScenarioSpec,
    StepDataset,
    build_scenario,
    filter_step_dataset,
    load_scenario,
    read_key_values,
    relabel,
)

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "no_remodel", "no_micro", "full", "full_memory")
DIVERGENCE_LIMIT = 1e6
METRICS_HEADER = [
    "step",
    "epoch",
    "batch",
    "loss_total",
    "loss_bce_p",
    "loss_bce_d",
    "loss_contrastive",
]


class DivergenceError(RuntimeError):
    pass


@dataclass
class RunConfig:
    # scenario
    num_classes: int = 8
    notation: str | None = "4-1"
    step_sizes: str | None = None
    mode: str = "overlapped"
    order_seed: int | None = None
    scenario_file: str | None = None
    # data
    data_dir: str | None = None
    data_seed: int = 0
    num_train: int = 200
    num_val: int = 40
    height: int = 32
    width: int = 32
    noise: float = 0.2
    # model
    in_channels: int = 3
    feature_channels: int = 32
    depth: int = 1
    kernel_size: int = 3
    K: int = 5
    init_scale: float | None = None
    # objective
    tau: float = 0.7
    lam: float = 1.0
    # proposals
    proposal_generator: str = "oracle"
    max_n: int = 32
    tiles_y: int = 4
    tiles_x: int = 4
    fixed_n: int = 0
    # optimisation
    learning_rate: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs_per_step: int = 60
    batch_size: int = 8
    freeze_from_step: int = 2
    # replay
    memory_capacity: int = 20
    # run
    seed: int = 0
    variant: str = "full"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.proposal_generator not in ("oracle", "grid"):
            raise ValueError(f"unknown proposal generator {self.proposal_generator!r}")
        if self.variant == "full_memory" and self.memory_capacity < 1:
            raise ValueError("full_memory needs memory_capacity >= 1")

    # variant switches -------------------------------------------------
    @property
    def use_proposal_branch(self) -> bool:
        return self.variant != "baseline"

    @property
    def use_remodel(self) -> bool:
        return self.variant in ("no_micro", "full", "full_memory")

    @property
    def use_contrastive(self) -> bool:
        return self.variant in ("no_remodel", "full", "full_memory")

    @property
    def use_memory(self) -> bool:
        return self.variant == "full_memory"

    @property
    def num_unseen(self) -> int:
        return self.K if self.variant in ("no_remodel", "full", "full_memory") else 1

    @property
    def output_branch(self) -> str:
        return "proposal" if self.use_proposal_branch else "dense"

    def extractor_config(self) -> FeatureExtractorConfig:
        return FeatureExtractorConfig(self.in_channels, self.feature_channels, self.depth, self.kernel_size)

    def scenario(self) -> ScenarioSpec:
        if self.scenario_file:
            return load_scenario(self.scenario_file)
        sizes = [int(s) for s in self.step_sizes.split(",")] if self.step_sizes else None
        return build_scenario(
            self.num_classes,
            notation=None if sizes else self.notation,
            mode=self.mode,
            step_sizes=sizes,
            order_seed=self.order_seed,
        )

    def dataset(self) -> tuple[list[SegSample], list[SegSample]]:
        if self.data_dir:
            return load_dataset(self.data_dir)
        return generate_synthetic_dataset(
            self.data_seed,
            self.num_classes,
            self.num_train,
            self.num_val,
            self.height,
            self.width,
            self.noise,
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is not None:
                lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "RunConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, object] = {}
        for key, raw in values.items():
            kind = str(kinds[key])
            if raw.lower() in ("", "none"):
                kwargs[key] = None
            elif kind.startswith("int"):
                kwargs[key] = int(raw)
            elif kind.startswith("float"):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)  # type: ignore[arg-type]

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_mapping(read_key_values(Path(path).read_text()))


@dataclass
class StepMetrics:
    step: int
    losses: list[dict[str, float | int | None]] = field(default_factory=list)
    report: MiouReport | None = None
    checkpoint_sha256: str | None = None


@dataclass
class RunArtifacts:
    config: RunConfig
    scenario: ScenarioSpec
    steps: list[StepMetrics]
    models: list[MicroSegModel]
    buffer: MemoryBuffer | None = None
    out_dir: Path | None = None

    @property
    def final(self) -> StepMetrics:
        return self.steps[-1]


# -- proposals and batching -----------------------------------------------


def make_proposals(config: RunConfig, mask: np.ndarray) -> ProposalSet:
    if config.proposal_generator == "grid":
        props = generate_grid_proposals(mask.shape[0], mask.shape[1], config.tiles_y, config.tiles_x)
    else:
        props = generate_oracle_proposals(mask, config.max_n)
    if config.fixed_n:
        props = props.padded(config.fixed_n)
    return props


def stack_proposals(props: Sequence[ProposalSet], dtype: torch.dtype) -> torch.Tensor:
    """B x N x H x W with empty padding masks up to the largest N."""
    n = max(p.n for p in props)
    return torch.from_numpy(np.stack([p.padded(n).masks for p in props])).to(dtype)


def stack_images(samples: Sequence[SegSample], dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)


# -- training -------------------------------------------------------------


def _remodeled_targets(
    model: MicroSegModel,
    prev_model: MicroSegModel | None,
    step_data: StepDataset,
    images: torch.Tensor,
    proposals: torch.Tensor,
    config: RunConfig,
    t: int,
) -> np.ndarray:
    pseudo = None
    if t >= 2 and config.use_remodel:
        pseudo = pseudo_labels(prev_model, images, proposals, branch=config.output_branch)
    out = []
    for i, s in enumerate(step_data.samples):
        current = step_data.seen_classes if s.sample_id in step_data.memory_ids else step_data.current_classes
        p = None
        if pseudo is not None:
            p = type(pseudo)(pseudo.labels[i], pseudo.scores[i])
        out.append(remodel_labels(s.mask, p, current, config.tau))
    return np.stack(out)


def compute_losses(
    model: MicroSegModel,
    features: torch.Tensor,
    masks: torch.Tensor,
    labels: torch.Tensor,
    config: RunConfig,
    t: int,
) -> LossBreakdown:
    registry, k = model.registry, model.num_unseen
    if not config.use_proposal_branch:
        dense = bce_loss(dense_predict(model, features), labels, registry, k)
        zero = torch.zeros((), dtype=dense.dtype)
        return LossBreakdown(None, dense, zero, dense, config.lam)
    logits = proposal_predict(model, None, masks, features=features)
    bce_p = bce_loss(logits, labels, registry, k)
    bce_d = bce_loss(dense_predict(model, features), labels, registry, k) if t == 1 else None
    if config.use_contrastive:
        # slots compete only over pixels supervised as future classes
        future = (labels == FUTURE).to(logits.dtype).unsqueeze(1)
        con = contrastive_loss(torch.sigmoid(logits[:, len(registry) :]) * future)
    else:
        con = torch.zeros((), dtype=bce_p.dtype)
    return total_loss(t, bce_p, bce_d, con, config.lam)


def run_step(
    model: MicroSegModel,
    step_data: StepDataset,
    prev_model: MicroSegModel | None,
    config: RunConfig,
    t: int,
    proposals: dict[int, ProposalSet],
) -> tuple[MicroSegModel, StepMetrics]:
    """Train ``model`` in place for one learning step and return it with its loss log."""
    if (prev_model is None) != (t == 1):
        raise ValueError("a previous model is required exactly when t >= 2")
    if set(model.registry) != set(step_data.seen_classes):
        raise ValueError("model registry does not match the step's seen classes")
    dtype = model.dtype
    samples = step_data.samples
    images = stack_images(samples, dtype)
    masks = stack_proposals([proposals[s.sample_id] for s in samples], dtype)
    labels = torch.from_numpy(
        _remodeled_targets(model, prev_model, step_data, images, masks, config, t)
    )
    params = model.trainable_parameters()
    opt = torch.optim.SGD(
        params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )
    cached = None
    if model.frozen_extractor:
        with torch.no_grad():
            cached = extract_features(model, images)

    rng = np.random.default_rng([config.seed, t])
    metrics = StepMetrics(t)
    n = len(samples)
    for epoch in range(config.epochs_per_step):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(order[start : start + config.batch_size])
            feats = cached[idx] if cached is not None else extract_features(model, images[idx])
            losses = compute_losses(model, feats, masks[idx], labels[idx], config, t)
            total = float(losses.total.detach())  # type: ignore[union-attr]
            if not np.isfinite(total) or total > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"loss {total} at step {t}, epoch {epoch}, batch {b} "
                    f"(lr={config.learning_rate}); breakdown {losses.as_floats()}"
                )
            opt.zero_grad()
            losses.total.backward()  # type: ignore[union-attr]
            opt.step()
            row = {"step": t, "epoch": epoch, "batch": b}
            row.update({k: v for k, v in losses.as_floats().items() if k != "lam"})
            metrics.losses.append(row)
    return model, metrics


# -- evaluation -----------------------------------------------------------


def evaluate(
    model: MicroSegModel,
    val: Sequence[SegSample],
    proposals: dict[int, ProposalSet],
    base_classes: Sequence[int],
    branch: str = "proposal",
    batch_size: int = 64,
) -> MiouReport:
    seen = frozenset(model.registry)
    conf = ConfusionMatrix.for_classes(seen)
    for start in range(0, len(val), batch_size):
        chunk = val[start : start + batch_size]
        images = stack_images(chunk, model.dtype)
        masks = stack_proposals([proposals[s.sample_id] for s in chunk], model.dtype)
        pred = inference(model, images, masks, include_unseen=True, branch=branch)
        gt = np.stack([relabel(s.mask, seen) for s in chunk])
        conf = accumulate(conf, pred, gt)
    base = set(base_classes) & seen
    return miou(conf, base, seen - base)


# -- full runs ------------------------------------------------------------


def _write_run_files(out: Path, art: RunArtifacts) -> None:
    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for sm in art.steps:
            for r in sm.losses:
                w.writerow(
                    [
                        r["step"],
                        r["epoch"],
                        r["batch"],
                        fmt(r["total"]),  # type: ignore[arg-type]
                        "" if r["bce_proposal"] is None else fmt(r["bce_proposal"]),  # type: ignore[arg-type]
                        "" if r["bce_dense"] is None else fmt(r["bce_dense"]),  # type: ignore[arg-type]
                        fmt(r["contrastive"]),  # type: ignore[arg-type]
                    ]
                )
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "class_id", "iou"])
        for sm in art.steps:
            w.writerows(summary_rows(sm.step, sm.report))  # type: ignore[arg-type]
    with (out / "steps.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "checkpoint", "sha256", "base_miou", "novel_miou", "all_miou"])
        for sm in art.steps:
            rep = sm.report
            w.writerow(
                [
                    sm.step,
                    f"checkpoints/step_{sm.step:02d}.mseg",
                    sm.checkpoint_sha256,
                    fmt(rep.base_miou),  # type: ignore[union-attr]
                    fmt(rep.novel_miou),  # type: ignore[union-attr]
                    fmt(rep.all_miou),  # type: ignore[union-attr]
                ]
            )


def _run(
    config: RunConfig,
    spec: ScenarioSpec,
    train: Sequence[SegSample],
    val: Sequence[SegSample],
    out_dir: str | Path | None,
    label: str,
) -> RunArtifacts:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
        (out / "variant.txt").write_text(label + "\n")

    train_props = {s.sample_id: make_proposals(config, s.mask) for s in train}
    val_props = {s.sample_id: make_proposals(config, s.mask) for s in val}
    by_id = {s.sample_id: s for s in train}

    model = MicroSegModel(config.extractor_config(), config.num_unseen, seed=config.seed)
    buffer = MemoryBuffer(config.memory_capacity, rng_seed=config.seed) if config.use_memory else None
    art = RunArtifacts(config, spec, [], [], buffer, out)
    prev_model: MicroSegModel | None = None
    prev_ids: list[int] = []
    base = spec.classes_at(1)

    for t in range(1, spec.num_steps + 1):
        if t >= 2:
            prev_model = copy.deepcopy(model).eval()
        if t >= config.freeze_from_step and not model.frozen_extractor:
            model = freeze_extractor(model)
        model = expand_head(model, spec.classes_at(t), config.init_scale, seed=config.seed)
        model.step = t

        step_data = filter_step_dataset(train, spec, t)
        if buffer is not None and t >= 2:
            buffer = update_memory(
                buffer, [by_id[i] for i in prev_ids], spec.seen_until(t - 1), step=t - 1
            )
            step_data = merge_for_training(step_data, buffer, t)
            if out is not None:
                (out / "memory").mkdir(exist_ok=True)
                write_manifest(buffer, out / "memory" / f"step_{t:02d}.txt")
        prev_ids = [s.sample_id for s in step_data.samples if s.sample_id not in step_data.memory_ids]

        model, metrics = run_step(model, step_data, prev_model, config, t, train_props)
        metrics.report = evaluate(model, val, val_props, base, branch=config.output_branch)
        if out is not None:
            metrics.checkpoint_sha256 = checkpoint.save_checkpoint(
                model, out / "checkpoints" / f"step_{t:02d}.mseg"
            )
        else:
            metrics.checkpoint_sha256 = checkpoint.sha256_of(model)
        log.info(
            "%s step %d: base %.3f novel %.3f all %.3f",
            label,
            t,
            metrics.report.base_miou,
            metrics.report.novel_miou,
            metrics.report.all_miou,
        )
        art.steps.append(metrics)
        art.models.append(copy.deepcopy(model))
    art.buffer = buffer
    if out is not None:
        _write_run_files(out, art)
    return art


def run_scenario(
    config: RunConfig,
    dataset: tuple[Sequence[SegSample], Sequence[SegSample]] | None = None,
    out_dir: str | Path | None = None,
) -> RunArtifacts:
    train, val = dataset if dataset is not None else config.dataset()
    return _run(config, config.scenario(), train, val, out_dir, config.variant)


def joint_train(
    config: RunConfig,
    dataset: tuple[Sequence[SegSample], Sequence[SegSample]] | None = None,
    out_dir: str | Path | None = None,
) -> RunArtifacts:
    """Offline upper bound: every class in one step with the full method.

    Each class is trained for ``epochs_per_step`` epochs, as in the
    incremental run where it is current.
    """
    train, val = dataset if dataset is not None else config.dataset()
    spec = config.scenario()
    joint_spec = ScenarioSpec(spec.class_order, (spec.num_classes,), spec.mode)
    joint_config = dataclasses.replace(config, variant="full")
    return _run(joint_config, joint_spec, train, val, out_dir, "joint")
