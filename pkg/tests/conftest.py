import sys

import pytest
import torch

from rangesr.config import desk_config
from rangesr.pipeline import prepare_corpus
from rangesr.synthetic import desk_scene_config, generate_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_clouds():
    return generate_synthetic(0, desk_scene_config(), 10)


@pytest.fixture(scope="session")
def desk_cfg():
    return desk_config()


@pytest.fixture(scope="session")
def desk_data(desk_clouds, desk_cfg):
    return prepare_corpus(desk_clouds, desk_cfg.geometry, desk_cfg.spec)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
