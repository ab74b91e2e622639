"""Training objective: unseen-slot aggregation, BCE over remodeled labels,
contrastive separation of the unseen slots, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn.functional as F

from microseg.remodel import FUTURE


@dataclass
class LossBreakdown:
    bce_proposal: torch.Tensor | float | None
    bce_dense: torch.Tensor | float | None
    contrastive: torch.Tensor | float
    total: torch.Tensor | float
    lam: float

    def as_floats(self) -> dict[str, float | None]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor):
                v = v.detach()
            out[f.name] = None if v is None else float(v)
        return out


def aggregate_unseen(pixel_logits: torch.Tensor, num_unseen: int, num_seen: int | None = None):
    """Return ``(seen logits, unseen score)`` where the score sums the trailing slots."""
    n_out = pixel_logits.shape[-3]
    if num_unseen < 1 or num_unseen > n_out:
        raise ValueError(f"K={num_unseen} does not fit {n_out} output channels")
    if num_seen is not None and num_seen + num_unseen != n_out:
        raise ValueError(f"{n_out} channels != {num_seen} seen + {num_unseen} unseen")
    split = n_out - num_unseen
    return pixel_logits[..., :split, :, :], pixel_logits[..., split:, :, :].sum(dim=-3)


def bce_with_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise ``-[y log s(x) + (1-y) log(1-s(x))]`` in a saturation-safe form."""
    return F.binary_cross_entropy_with_logits(logits, target, reduction="none")


def bce_loss(
    pixel_logits: torch.Tensor,
    remodeled: torch.Tensor,
    registry: Sequence[int],
    num_unseen: int,
) -> torch.Tensor:
    """BCE over seen classes plus BCE of the aggregated unseen score.

    ``pixel_logits`` is ``(B,) S+K x H x W`` and ``remodeled`` holds class ids
    or FUTURE. The seen term averages over S classes and Q pixels, the unseen
    term over Q pixels; batches are averaged per image.
    """
    if not bool(torch.isfinite(pixel_logits).all()):
        raise ValueError("non-finite logits")
    logits = pixel_logits if pixel_logits.dim() == 4 else pixel_logits.unsqueeze(0)
    labels = torch.as_tensor(remodeled)
    labels = labels if labels.dim() == 3 else labels.unsqueeze(0)
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    seen, unseen = aggregate_unseen(logits, num_unseen, len(registry))
    labels = labels.long()
    ids = torch.tensor(list(registry), dtype=torch.long)
    onehot = (labels.unsqueeze(1) == ids[None, :, None, None]).to(logits.dtype)
    future = (labels == FUTURE).to(logits.dtype)
    q = labels.shape[1] * labels.shape[2]
    seen_term = bce_with_logits(seen, onehot).sum(dim=(1, 2, 3)) / (max(len(registry), 1) * q)
    unseen_term = bce_with_logits(unseen, future).sum(dim=(1, 2)) / q
    return (seen_term + unseen_term).mean()


def branch_loss(t: int, bce_proposal, bce_dense=None):
    if t < 1:
        raise ValueError(f"invalid step {t}")
    if t == 1:
        if bce_dense is None:
            raise ValueError("step 1 combines both branches; the dense loss is missing")
        return bce_proposal + bce_dense
    if bce_dense is not None:
        raise ValueError(f"the dense branch is only supervised at step 1 (got t={t})")
    return bce_proposal


def contrastive_loss(unseen_maps: torch.Tensor) -> torch.Tensor:
    """Softmax separation of the K unseen maps after unit normalisation.

    ``unseen_maps`` is ``(B,) K x H x W`` (already activated). All-zero maps
    stay at zero instead of being normalised. Batches are averaged.
    """
    maps = unseen_maps if unseen_maps.dim() == 4 else unseen_maps.unsqueeze(0)
    b, k = maps.shape[:2]
    if k < 1:
        raise ValueError("need at least one unseen map")
    v = maps.reshape(b, k, -1)
    norm = v.norm(dim=-1, keepdim=True)
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    v = torch.where(norm > 0, v / safe, torch.zeros_like(v))
    gram = v @ v.transpose(1, 2)
    per_map = torch.logsumexp(gram, dim=-1) - torch.diagonal(gram, dim1=1, dim2=2)
    return per_map.mean(dim=-1).mean()


def total_loss(t: int, bce_proposal, bce_dense, contrastive, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    bce = branch_loss(t, bce_proposal, bce_dense)
    return LossBreakdown(bce_proposal, bce_dense, contrastive, bce + lam * contrastive, lam)
