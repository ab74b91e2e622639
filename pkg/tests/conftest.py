import numpy as np
import pytest
import torch

from microseg.model import FeatureExtractorConfig, MicroSegModel, expand_head

torch.set_num_threads(1)


def tiny_model(classes=(1, 2), k=2, channels=4, depth=1, seed=0, in_channels=3):
    cfg = FeatureExtractorConfig(in_channels=in_channels, feature_channels=channels, depth=depth)
    model = MicroSegModel(cfg, k, seed=seed)
    return expand_head(model, classes, seed=seed) if classes else model


def random_partition(rng, n, h, w):
    """Index map using every label in 0..n-1 at least once (needs n <= h*w)."""
    index = rng.integers(0, n, size=(h, w))
    cells = rng.permutation(h * w)[:n]
    index.ravel()[cells] = np.arange(n)
    return index


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_differences(fn, params, h=1e-4):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
