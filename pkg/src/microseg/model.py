"""Two-branch segmentation model.

A small convolutional extractor feeds a dense 1x1 head and a proposal head.
The proposal head classifies masked-average-pooled prototypes and the logits
are scattered back to pixels through the proposal masks. Both heads share one
class registry: seen classes in learning order followed by K unseen slots.

Tensors are batched (B leading); single images are accepted and returned
without the batch axis.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from microseg.proposals import ProposalSet

UNSEEN = 0  # label emitted for the aggregated unseen class


@dataclass(frozen=True)
class FeatureExtractorConfig:
    in_channels: int = 3
    feature_channels: int = 16
    depth: int = 2
    kernel_size: int = 3

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.feature_channels < 4:
            raise ValueError("feature_channels must be >= 4")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")


@dataclass
class PrototypeMatrix:
    values: torch.Tensor  # (B,) N x C
    empty: torch.Tensor  # (B,) N, True for proposals without pixels


class MicroSegModel(nn.Module):
    def __init__(
        self,
        config: FeatureExtractorConfig,
        num_unseen: int,
        seed: int = 0,
        dtype: torch.dtype = torch.float64,
    ) -> None:
        super().__init__()
        if num_unseen < 1:
            raise ValueError("need at least one unseen slot")
        self.config = config
        self.num_unseen = num_unseen
        self.registry: list[int] = []
        self.frozen_extractor = False
        self.step = 0
        self.seed = seed

        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = config.in_channels
        for _ in range(config.depth):
            conv = nn.Conv2d(
                c_in,
                config.feature_channels,
                config.kernel_size,
                padding=config.kernel_size // 2,
                dtype=dtype,
            )
            fan_in = c_in * config.kernel_size**2
            bound = math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen, dtype=dtype) * 2 * bound - bound)
                conv.bias.zero_()
            convs.append(conv)
            c_in = config.feature_channels
        self.convs = nn.ModuleList(convs)

        c = config.feature_channels
        scale = default_init_scale(c)
        unseen_w = _uniform(np.random.default_rng([seed, 1 << 20]), (num_unseen, c), scale, dtype)
        self.dense_weight = nn.Parameter(unseen_w.clone())
        self.dense_bias = nn.Parameter(torch.zeros(num_unseen, dtype=dtype))
        self.prop_weight = nn.Parameter(unseen_w.clone())
        self.prop_bias = nn.Parameter(torch.zeros(num_unseen, dtype=dtype))

    @property
    def num_outputs(self) -> int:
        return len(self.registry) + self.num_unseen

    @property
    def feature_channels(self) -> int:
        return self.config.feature_channels

    def extractor_parameters(self) -> list[nn.Parameter]:
        return list(self.convs.parameters())

    def head_parameters(self) -> list[nn.Parameter]:
        return [self.dense_weight, self.dense_bias, self.prop_weight, self.prop_bias]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    @property
    def dtype(self) -> torch.dtype:
        return self.dense_weight.dtype


def default_init_scale(feature_channels: int) -> float:
    return 1.0 / math.sqrt(feature_channels)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], scale: float, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(-scale, scale, size=shape)).to(dtype)


def _as_batch(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() != ndim:
        raise ValueError(f"expected a {ndim - 1}-d or {ndim}-d tensor, got shape {tuple(x.shape)}")
    return x, False


def as_mask_tensor(proposals: ProposalSet | np.ndarray | torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(proposals, ProposalSet):
        proposals = proposals.masks
    if isinstance(proposals, np.ndarray):
        proposals = torch.from_numpy(proposals)
    return proposals.to(dtype)


def extract_features(model: MicroSegModel, image: torch.Tensor | np.ndarray) -> torch.Tensor:
    x = torch.as_tensor(image).to(model.dtype)
    x, single = _as_batch(x, 4)
    if x.shape[1] != model.config.in_channels:
        raise ValueError(f"image has {x.shape[1]} channels, model expects {model.config.in_channels}")
    for conv in model.convs:
        x = torch.tanh(conv(x))
    return x[0] if single else x


def masked_average_pool(features: torch.Tensor, proposals) -> PrototypeMatrix:
    """Mean feature vector inside each proposal; empty proposals give zero rows."""
    feats, single = _as_batch(features, 4)
    masks, _ = _as_batch(as_mask_tensor(proposals, feats.dtype), 4)
    if feats.shape[0] != masks.shape[0] or feats.shape[2:] != masks.shape[2:]:
        raise ValueError(
            f"features {tuple(feats.shape)} and proposals {tuple(masks.shape)} do not align"
        )
    sums = torch.einsum("bnhw,bchw->bnc", masks, feats)
    counts = masks.sum(dim=(2, 3))
    empty = counts == 0
    protos = sums / counts.clamp(min=1).unsqueeze(-1)
    if single:
        return PrototypeMatrix(protos[0], empty[0])
    return PrototypeMatrix(protos, empty)


def classify_prototypes(model: MicroSegModel, prototypes: PrototypeMatrix | torch.Tensor) -> torch.Tensor:
    values = prototypes.values if isinstance(prototypes, PrototypeMatrix) else prototypes
    if values.shape[-1] != model.feature_channels:
        raise ValueError(
            f"prototype width {values.shape[-1]} != feature channels {model.feature_channels}"
        )
    return values @ model.prop_weight.T + model.prop_bias


def reorganize(proposal_logits: torch.Tensor, proposals, check: bool = True) -> torch.Tensor:
    """Scatter per-proposal logits to pixels: ``logits^T`` contracted with the masks."""
    logits, single = _as_batch(torch.as_tensor(proposal_logits), 3)
    masks, _ = _as_batch(as_mask_tensor(proposals, logits.dtype), 4)
    if masks.shape[:2] != logits.shape[:2]:
        raise ValueError(f"{tuple(logits.shape)} logits for {tuple(masks.shape)} proposals")
    if check:
        coverage = masks.sum(dim=1)
        if not bool((coverage == 1).all()):
            b, i, j = (int(v) for v in torch.nonzero(coverage != 1)[0])
            raise ValueError(
                f"proposals are not a partition: pixel ({i}, {j}) of sample {b} "
                f"is covered {int(coverage[b, i, j])} times"
            )
    out = torch.einsum("bnk,bnhw->bkhw", logits, masks)
    return out[0] if single else out


def dense_predict(model: MicroSegModel, features: torch.Tensor) -> torch.Tensor:
    feats, single = _as_batch(features, 4)
    if feats.shape[1] != model.feature_channels:
        raise ValueError(f"feature map has {feats.shape[1]} channels, expected {model.feature_channels}")
    out = torch.einsum("kc,bchw->bkhw", model.dense_weight, feats) + model.dense_bias[:, None, None]
    return out[0] if single else out


def proposal_predict(model: MicroSegModel, image, proposals, features: torch.Tensor | None = None) -> torch.Tensor:
    if features is None:
        features = extract_features(model, image)
    protos = masked_average_pool(features, proposals)
    return reorganize(classify_prototypes(model, protos), proposals)


def expand_head(
    model: MicroSegModel,
    new_classes: Sequence[int],
    init_scale: float | None = None,
    seed: int | None = None,
) -> MicroSegModel:
    """Return a copy with channels for ``new_classes`` inserted before the unseen slots."""
    new_classes = [int(c) for c in new_classes]
    if len(set(new_classes)) != len(new_classes):
        raise ValueError(f"duplicate classes in {new_classes}")
    clash = set(new_classes) & set(model.registry)
    if clash:
        raise ValueError(f"classes {sorted(clash)} are already registered")
    out = copy.deepcopy(model)
    if not new_classes:
        return out
    scale = default_init_scale(model.feature_channels) if init_scale is None else init_scale
    seed = model.seed if seed is None else seed
    rng = np.random.default_rng([seed, len(model.registry)])
    n_seen, n_new, c = len(model.registry), len(new_classes), model.feature_channels
    # dense and proposal heads get independent draws
    dense_new = _uniform(rng, (n_new, c), scale, model.dtype)
    prop_new = _uniform(rng, (n_new, c), scale, model.dtype)
    zeros = torch.zeros(n_new, dtype=model.dtype)

    def grow(param: nn.Parameter, new: torch.Tensor) -> nn.Parameter:
        data = param.detach()
        grown = torch.cat([data[:n_seen], new, data[n_seen:]])
        return nn.Parameter(grown, requires_grad=param.requires_grad)

    out.dense_weight = grow(model.dense_weight, dense_new)
    out.dense_bias = grow(model.dense_bias, zeros)
    out.prop_weight = grow(model.prop_weight, prop_new)
    out.prop_bias = grow(model.prop_bias, zeros)
    out.registry = list(model.registry) + new_classes
    return out


def freeze_extractor(model: MicroSegModel) -> MicroSegModel:
    out = copy.deepcopy(model)
    for p in out.extractor_parameters():
        p.requires_grad_(False)
    out.frozen_extractor = True
    return out


def split_unseen(logits: torch.Tensor, num_unseen: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Split class-axis logits into seen logits and the summed unseen score."""
    n_seen = logits.shape[-3] - num_unseen
    if n_seen < 0:
        raise ValueError(f"{logits.shape[-3]} channels cannot hold {num_unseen} unseen slots")
    return logits[..., :n_seen, :, :], logits[..., n_seen:, :, :].sum(dim=-3)


def predict_logits(model: MicroSegModel, image, proposals=None, branch: str = "proposal") -> torch.Tensor:
    if branch == "proposal":
        if proposals is None:
            raise ValueError("the proposal branch needs proposals")
        return proposal_predict(model, image, proposals)
    if branch == "dense":
        return dense_predict(model, extract_features(model, image))
    raise ValueError(f"unknown branch {branch!r}")


def labels_from_logits(model: MicroSegModel, logits: torch.Tensor, include_unseen: bool = True) -> np.ndarray:
    seen, unseen = split_unseen(logits, model.num_unseen)
    scores = torch.cat([seen, unseen.unsqueeze(-3)], dim=-3) if include_unseen else seen
    if scores.shape[-3] == 0:
        raise ValueError("model has no seen classes to predict")
    # argmax returns the first maximal index: ties go to the lowest registry slot
    idx = torch.argmax(scores, dim=-3).cpu().numpy()
    lookup = np.array(list(model.registry) + [UNSEEN], dtype=np.uint8)
    return lookup[idx]


@torch.no_grad()
def inference(
    model: MicroSegModel,
    image,
    proposals=None,
    include_unseen: bool = True,
    branch: str = "proposal",
) -> np.ndarray:
    """Per-pixel argmax label map; ``0`` marks the aggregated unseen class."""
    return labels_from_logits(model, predict_logits(model, image, proposals, branch), include_unseen)
