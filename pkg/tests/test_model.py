import numpy as np
import pytest
import torch

from conftest import random_partition, tiny_model
from microseg.model import (
    FeatureExtractorConfig,
    MicroSegModel,
    classify_prototypes,
    dense_predict,
    expand_head,
    extract_features,
    freeze_extractor,
    inference,
    labels_from_logits,
    masked_average_pool,
    proposal_predict,
    reorganize,
)
from microseg.proposals import ProposalSet


def test_feature_shape_and_same_padding():
    model = tiny_model(channels=5, depth=2)
    feats = extract_features(model, torch.zeros(2, 3, 7, 9))
    assert feats.shape == (2, 5, 7, 9)
    assert extract_features(model, torch.zeros(3, 7, 9)).shape == (5, 7, 9)
    with pytest.raises(ValueError, match="channels"):
        extract_features(model, torch.zeros(4, 7, 9))


def test_config_validation():
    with pytest.raises(ValueError):
        FeatureExtractorConfig(kernel_size=2)
    with pytest.raises(ValueError):
        MicroSegModel(FeatureExtractorConfig(), 0)


def test_map_brute_force(rng):
    feats = torch.from_numpy(rng.standard_normal((4, 5, 6)))
    props = ProposalSet.from_index_map(random_partition(rng, 3, 5, 6)).padded(4)
    pm = masked_average_pool(feats, props)
    for n in range(4):
        pix = [(i, j) for i in range(5) for j in range(6) if props.masks[n, i, j]]
        if not pix:
            assert pm.empty[n] and torch.all(pm.values[n] == 0)
            continue
        want = sum(feats[:, i, j] for i, j in pix) / len(pix)
        assert torch.allclose(pm.values[n], want, atol=1e-12, rtol=0)


def test_reorganize_is_lookup(rng):
    index = random_partition(rng, 4, 3, 5)
    logits = torch.from_numpy(rng.standard_normal((4, 6)))
    out = reorganize(logits, ProposalSet.from_index_map(index))
    assert torch.equal(out, logits[torch.from_numpy(index)].permute(2, 0, 1))


def test_reorganize_rejects_overlap():
    masks = np.ones((2, 2, 2), bool)
    with pytest.raises(ValueError, match="not a partition"):
        reorganize(torch.zeros(2, 3), masks)


def test_proposal_logits_constant_on_each_region(rng):
    model = tiny_model()
    index = random_partition(rng, 3, 6, 6)
    logits = proposal_predict(model, torch.from_numpy(rng.standard_normal((3, 6, 6))), ProposalSet.from_index_map(index))
    for n in range(3):
        region = logits[:, torch.from_numpy(index == n)]
        assert torch.equal(region, region[:, :1].expand_as(region))


def test_expand_head_preserves_old_rows_and_registry():
    model = tiny_model(classes=(1, 2), k=3)
    grown = expand_head(model, [3, 4])
    assert grown.registry == [1, 2, 3, 4]
    assert grown.prop_weight.shape == (4 + 3, model.feature_channels)
    assert torch.equal(grown.prop_weight[:2], model.prop_weight[:2])
    assert torch.equal(grown.prop_weight[4:], model.prop_weight[2:])
    assert torch.equal(grown.dense_bias[2:4], torch.zeros(2, dtype=torch.float64))
    assert model.registry == [1, 2]  # original untouched
    with pytest.raises(ValueError, match="already registered"):
        expand_head(grown, [2])
    with pytest.raises(ValueError, match="duplicate"):
        expand_head(grown, [5, 5])


def test_expand_head_is_seed_deterministic():
    a = expand_head(tiny_model(seed=3), [7])
    b = expand_head(tiny_model(seed=3), [7])
    assert torch.equal(a.prop_weight, b.prop_weight)


def test_freeze_extractor():
    model = freeze_extractor(tiny_model())
    assert model.frozen_extractor
    assert all(not p.requires_grad for p in model.extractor_parameters())
    assert all(p.requires_grad for p in model.head_parameters())
    assert len(model.trainable_parameters()) == len(model.head_parameters())


def test_labels_tie_break_and_unseen():
    model = tiny_model(classes=(4, 2), k=2)
    logits = torch.zeros(4, 1, 3, dtype=torch.float64)
    logits[:, 0, 0] = torch.tensor([1.0, 1.0, 0.0, 0.0])  # tie between 4 and 2
    logits[:, 0, 1] = torch.tensor([0.0, 3.0, 1.0, 1.0])
    logits[:, 0, 2] = torch.tensor([0.0, 1.0, 1.0, 0.5])  # unseen sum 1.5 wins
    assert labels_from_logits(model, logits).tolist() == [[4, 2, 0]]
    assert labels_from_logits(model, logits, include_unseen=False).tolist() == [[4, 2, 2]]


def test_inference_dense_and_proposal(rng):
    model = tiny_model()
    img = rng.standard_normal((3, 5, 5))
    props = ProposalSet.from_index_map(random_partition(rng, 3, 5, 5))
    out = inference(model, img, props)
    assert out.shape == (5, 5) and set(np.unique(out)) <= {0, 1, 2}
    dense = inference(model, img, branch="dense")
    assert dense.shape == (5, 5)
    with pytest.raises(ValueError):
        inference(model, img, None, branch="proposal")


def test_head_shapes():
    model = tiny_model(classes=(1, 2, 3), k=2)
    feats = torch.zeros(2, model.feature_channels, 4, 4, dtype=torch.float64)
    assert dense_predict(model, feats).shape == (2, 5, 4, 4)
    assert classify_prototypes(model, torch.zeros(6, model.feature_channels, dtype=torch.float64)).shape == (6, 5)
