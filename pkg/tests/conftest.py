import pytest

from pointdif.config import TrainConfig
from pointdif.networks import ModelDims
from pointdif.pointcloud_io import make_toy_dataset

TINY_DIMS = ModelDims(D=16, heads=2, blocks=1, cond_dim=16, time_dim=8, pcnet_dims=(3, 8, 8, 8, 8, 8),
                      embed_hidden=(8, 16), pos_hidden=8, canet_hidden=16)


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=4, batch_size=4, T=20, h=4, num_patches=8, patch_size=8, seed=3,
                       dims=TINY_DIMS)


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_toy_dataset(4, 32, seed=0)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
