"""Pseudo-labels from the previous model and supervision-label remodeling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

from microseg.model import MicroSegModel, predict_logits, split_unseen

FUTURE = 255  # sentinel for pixels assigned to the future-class group


@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # class ids over the previous model's seen classes
    scores: np.ndarray  # sigmoid of the winning logit, in (0, 1)


def pseudo_labels_from_logits(registry: list[int], seen_logits: torch.Tensor) -> PseudoLabelMap:
    """Argmax label and sigmoid score over the seen-class axis (``-3``)."""
    if not registry:
        raise ValueError("previous model has no seen classes")
    best = seen_logits.amax(dim=-3)
    # argmax picks the first maximal index, so ties go to the lowest registry slot
    idx = torch.argmax(seen_logits, dim=-3)
    lookup = np.asarray(registry, dtype=np.uint8)
    return PseudoLabelMap(lookup[idx.cpu().numpy()], torch.sigmoid(best).cpu().numpy())


@torch.no_grad()
def pseudo_labels(
    prev_model: MicroSegModel | None,
    image,
    proposals=None,
    branch: str = "proposal",
) -> PseudoLabelMap:
    if prev_model is None or prev_model.step < 1 or not prev_model.registry:
        raise ValueError("pseudo-labels need a model from a previous step (t >= 2)")
    logits = predict_logits(prev_model, image, proposals, branch)
    seen, _ = split_unseen(logits, prev_model.num_unseen)
    return pseudo_labels_from_logits(prev_model.registry, seen)


def remodel_labels(
    gt: np.ndarray,
    pseudo: PseudoLabelMap | None,
    current_classes: Iterable[int],
    tau: float,
) -> np.ndarray:
    """Per pixel: current-class labels stay; confident unseen pixels take the
    pseudo-label (score strictly above ``tau``); everything else is FUTURE."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    gt = np.asarray(gt)
    current = np.array(sorted(int(c) for c in current_classes), dtype=gt.dtype)
    is_current = np.isin(gt, current)
    stray = ~is_current & (gt != 0)
    if stray.any():
        bad = sorted({int(v) for v in gt[stray]})
        raise ValueError(f"ground truth holds classes {bad} outside the current set")
    out = np.full(gt.shape, FUTURE, dtype=np.uint8)
    out[is_current] = gt[is_current]
    if pseudo is not None:
        if pseudo.labels.shape != gt.shape:
            raise ValueError("pseudo-label map does not match the ground truth shape")
        take = ~is_current & (pseudo.scores > tau)
        out[take] = pseudo.labels[take]
    return out
