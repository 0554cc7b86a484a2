import numpy as np
import pytest

from shapvote.model import PatchNet

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_net(rng, n_patches=4, in_features=4, embed_dim=6, n_classes=3, **kw):
    """A network with every parameter (biases included) randomised."""
    net = PatchNet(n_patches, in_features, embed_dim, n_classes, 2, rng=rng, **kw)
    for p in net.parameters():
        p.value[...] = rng.uniform(-1, 1, p.value.shape)
    net.mark_updated()
    return net
