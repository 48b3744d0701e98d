import numpy as np
import pytest

from aand.corpus import CorpusConfig, make_class_corpus
from aand.trainer import TrainConfig

SMALL = dict(channels=(4, 8, 16), n_memory=5, batch_size=4, stage1_epochs=2, stage2_epochs=2)


def small_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**SMALL, "seed": 1, **overrides})


@pytest.fixture(scope="session")
def small_corpus():
    return make_class_corpus(CorpusConfig(n_train=8, n_test_normal=3, n_test_abnormal=3), "stripes")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
