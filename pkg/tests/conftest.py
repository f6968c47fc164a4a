import sys
from pathlib import Path

import pytest
import torch

from beal.synthdata import DatasetConfig, generate_dataset, load_dataset

torch.set_num_threads(1)
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ds"
    generate_dataset(DatasetConfig(n_source=4, n_target=4, n_target_test=2, size=96, seed=7), path)
    return path


@pytest.fixture(scope="session")
def small_samples(small_dataset):
    return load_dataset(small_dataset)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
