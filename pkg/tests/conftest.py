import pytest
import torch

from fcx.afno import ArchConfig
from fcx.synthdata import Dataset, DatasetMeta, generate_dataset

torch.set_num_threads(1)

SMALL_META = DatasetMeta(grid=(16, 32), n_timesteps=96, spinup=16)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_data")
    generate_dataset(SMALL_META, root)
    return Dataset(root)


@pytest.fixture
def small_arch():
    return ArchConfig(grid=(16, 32), channels=4, patch=4, embed_dim=16, depth=2, num_blocks=4)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
