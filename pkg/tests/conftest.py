import numpy as np
import pytest
import torch

from earseld.dataset import Dataset, synthesize_dataset
from earseld.scenes import DatasetConfig

TINY_COUNTS = {"Train-anec": 4, "Train-rev": 4, "Train-base": 2, "Train-target": 2, "Test": 2}


def tiny_config(**kw) -> DatasetConfig:
    base = dict(seed=3, n_reverb_s=4, n_test=2, n_reverb_c=1, max_order=2, clip_length=4.0,
                events_per_clip=(2, 3), counts=dict(TINY_COUNTS))
    base.update(kw)
    return DatasetConfig(**base)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    synthesize_dataset(tiny_config(), root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_root):
    return Dataset.open(tiny_root)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def report_criterion(name: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
