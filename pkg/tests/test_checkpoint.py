import pytest
import torch

from conftest import tiny_model
from microseg.checkpoint import checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, sha256_of
from microseg.model import freeze_extractor


def test_round_trip(tmp_path):
    model = freeze_extractor(tiny_model(classes=(3, 1, 2), k=3, depth=2))
    model.step = 2
    digest = save_checkpoint(model, tmp_path / "m.mseg")
    assert digest == sha256_of(model)
    back = load_checkpoint(tmp_path / "m.mseg")
    assert back.registry == [3, 1, 2] and back.num_unseen == 3 and back.step == 2
    assert back.frozen_extractor and back.config == model.config
    for (n, a), (m, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert n == m and torch.equal(a, b)
    assert checkpoint_bytes(back) == checkpoint_bytes(model)


def test_corruption_is_detected():
    data = checkpoint_bytes(tiny_model())
    with pytest.raises(ValueError, match="magic"):
        checkpoint_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError, match="truncated"):
        checkpoint_from_bytes(data[:-3])
