import numpy as np
import pytest
import torch

from conftest import tiny_model
from microseg.proposals import ProposalSet
from microseg.remodel import FUTURE, PseudoLabelMap, pseudo_labels, pseudo_labels_from_logits, remodel_labels


def test_rules():
    gt = np.array([[3, 0, 0, 0]], np.uint8)
    pseudo = PseudoLabelMap(np.array([[1, 1, 2, 2]], np.uint8), np.array([[0.9, 0.9, 0.7, 0.5]]))
    out = remodel_labels(gt, pseudo, {3}, tau=0.7)
    # current label kept, score above tau adopted, at tau and below -> FUTURE
    assert out.tolist() == [[3, 1, FUTURE, FUTURE]]
    assert remodel_labels(gt, None, {3}, 0.7).tolist() == [[3, FUTURE, FUTURE, FUTURE]]


def test_invalid_inputs():
    gt = np.array([[5]], np.uint8)
    with pytest.raises(ValueError, match="outside"):
        remodel_labels(gt, None, {3}, 0.5)
    with pytest.raises(ValueError, match="tau"):
        remodel_labels(np.zeros((1, 1), np.uint8), None, {3}, 1.0)


def test_pseudo_labels_from_logits():
    logits = torch.tensor([[[0.0, 2.0]], [[1.0, 2.0]]], dtype=torch.float64)  # 2 classes, 1x2
    p = pseudo_labels_from_logits([5, 6], logits)
    assert p.labels.tolist() == [[6, 5]]  # tie -> lower slot
    assert np.allclose(p.scores, 1 / (1 + np.exp(-np.array([[1.0, 2.0]]))))


def test_pseudo_labels_need_previous_model(rng):
    with pytest.raises(ValueError):
        pseudo_labels(None, torch.zeros(3, 4, 4))
    model = tiny_model(classes=(1, 2))
    model.step = 1
    props = ProposalSet.from_index_map(np.zeros((4, 4), int))
    p = pseudo_labels(model, torch.from_numpy(rng.standard_normal((3, 4, 4))), props)
    assert p.labels.shape == (4, 4) and set(np.unique(p.labels)) <= {1, 2}
    assert ((p.scores > 0) & (p.scores < 1)).all()
